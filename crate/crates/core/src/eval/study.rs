//! Embedding-space studies: the four-way pair-similarity comparison,
//! SmoothGrad saliency maps and raw embedding exports.

use ndarray::{Array1, Array2};
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::eval::metrics::EvalError;
use crate::face::FaceImage;
use crate::manifest::{DatasetManifest, SampleRecord};
use crate::model::{Embedder, IdentificationModel};
use crate::store::ImageStore;

/// Summary statistics of one similarity group.
#[derive(Debug, Clone, Serialize)]
pub struct GroupStats {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    /// Standard error of the mean.
    pub stderr: f64,
}

impl GroupStats {
    fn from_values(values: &[f64]) -> Self {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n as f64 - 1.0)
        } else {
            0.0
        };
        let std = var.sqrt();
        Self { n, mean, std, stderr: std / (n as f64).sqrt() }
    }
}

/// Cosine similarities of the four pair kinds: real pairs sharing an
/// identity, real pairs across identities, fake vs a real of its swap
/// source, fake vs a real of its swap target.
#[derive(Debug, Clone, Serialize)]
pub struct PairSimilarityStudy {
    pub same_id_real: Vec<f64>,
    pub diff_id_real: Vec<f64>,
    pub fake_vs_source: Vec<f64>,
    pub fake_vs_target: Vec<f64>,
    pub same_id_real_stats: GroupStats,
    pub diff_id_real_stats: GroupStats,
    pub fake_vs_source_stats: GroupStats,
    pub fake_vs_target_stats: GroupStats,
}

fn cosine(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    let na = a.dot(a).sqrt();
    let nb = b.dot(b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.dot(b) / (na * nb)
}

/// Samples `n_pairs` pairs of each kind and measures embedding cosine
/// similarity. Deterministic given the seed.
pub fn pair_similarity_study(
    extractor: &dyn Embedder,
    manifest: &DatasetManifest,
    store: &dyn ImageStore,
    n_pairs: usize,
    seed: u64,
) -> Result<PairSimilarityStudy, EvalError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let reals: Vec<&SampleRecord> = manifest.records().iter().filter(|r| !r.is_fake).collect();
    let fakes: Vec<&SampleRecord> = manifest.records().iter().filter(|r| r.is_fake).collect();
    if fakes.is_empty() || reals.is_empty() {
        return Err(EvalError::SingleClassOnly);
    }
    let reals_of = |identity: &str| -> Vec<&SampleRecord> {
        reals
            .iter()
            .copied()
            .filter(|r| r.identity.as_deref() == Some(identity))
            .collect()
    };

    let mut embed_cache: std::collections::HashMap<String, Array1<f64>> = std::collections::HashMap::new();
    let mut embed = |image_ref: &str, store: &dyn ImageStore| -> Result<Array1<f64>, EvalError> {
        if let Some(z) = embed_cache.get(image_ref) {
            return Ok(z.clone());
        }
        let z = extractor.embed(&store.load(image_ref)?)?;
        embed_cache.insert(image_ref.to_string(), z.clone());
        Ok(z)
    };

    let mut same_id_real = Vec::with_capacity(n_pairs);
    let mut diff_id_real = Vec::with_capacity(n_pairs);
    let mut fake_vs_source = Vec::with_capacity(n_pairs);
    let mut fake_vs_target = Vec::with_capacity(n_pairs);

    for _ in 0..n_pairs {
        let fake = fakes.choose(&mut rng).expect("fakes non-empty");
        let source = fake.source_id.as_deref().expect("fake carries source");
        let target = fake.target_id.as_deref().expect("fake carries target");
        let source_pool = reals_of(source);
        let target_pool = reals_of(target);
        let source_real = source_pool
            .choose(&mut rng)
            .ok_or_else(|| EvalError::MissingCounterpart(source.to_string()))?;
        let target_real = target_pool
            .choose(&mut rng)
            .ok_or_else(|| EvalError::MissingCounterpart(target.to_string()))?;
        let zf = embed(&fake.image_ref, store)?;
        fake_vs_source.push(cosine(&zf, &embed(&source_real.image_ref, store)?));
        fake_vs_target.push(cosine(&zf, &embed(&target_real.image_ref, store)?));

        // same-identity real pair anchored at the same source identity
        if source_pool.len() < 2 {
            return Err(EvalError::MissingCounterpart(source.to_string()));
        }
        let a = source_pool.choose(&mut rng).expect("non-empty");
        let mut b = source_pool.choose(&mut rng).expect("non-empty");
        while b.image_ref == a.image_ref {
            b = source_pool.choose(&mut rng).expect("non-empty");
        }
        same_id_real.push(cosine(&embed(&a.image_ref, store)?, &embed(&b.image_ref, store)?));

        // different-identity real pair (source identity vs target identity)
        let c = target_pool.choose(&mut rng).expect("non-empty");
        diff_id_real.push(cosine(&embed(&a.image_ref, store)?, &embed(&c.image_ref, store)?));
    }

    Ok(PairSimilarityStudy {
        same_id_real_stats: GroupStats::from_values(&same_id_real),
        diff_id_real_stats: GroupStats::from_values(&diff_id_real),
        fake_vs_source_stats: GroupStats::from_values(&fake_vs_source),
        fake_vs_target_stats: GroupStats::from_values(&fake_vs_target),
        same_id_real,
        diff_id_real,
        fake_vs_source,
        fake_vs_target,
    })
}

/// Max-normalized per-pixel relevance map.
#[derive(Debug, Clone)]
pub struct SaliencyMap {
    values: Array2<f64>,
}

impl SaliencyMap {
    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    /// Number of pixels at or above `fraction` of the map maximum (which is
    /// 1 after normalization).
    pub fn pixels_above(&self, fraction: f64) -> usize {
        self.values.iter().filter(|&&v| v > fraction).count()
    }
}

/// SmoothGrad: average gradient-magnitude map of the predicted class's
/// centered logit over `n_samples` Gaussian-noised copies of the input.
pub fn smoothgrad_saliency(
    model: &IdentificationModel,
    image: &FaceImage,
    n_samples: usize,
    sigma: f64,
    seed: u64,
) -> Result<SaliencyMap, EvalError> {
    assert!(n_samples >= 1, "need at least one sample");
    let predicted = model.predict(image)?.argmax();
    let (h, w, c) = image.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = Array2::<f64>::zeros((h, w));
    for _ in 0..n_samples {
        let noisy = if sigma > 0.0 {
            let noised = image.pixels().mapv(|v| {
                let n: f64 = StandardNormal.sample(&mut rng);
                v + sigma * n
            });
            FaceImage::from_clamped(noised)
        } else {
            image.clone()
        };
        let grad = model.input_grad_of_centered_logit(&noisy, predicted)?;
        for r in 0..h {
            for col in 0..w {
                let mut v = 0.0;
                for ch in 0..c {
                    v += grad[[r, col, ch]].abs();
                }
                acc[[r, col]] += v / c as f64;
            }
        }
    }
    acc /= n_samples as f64;
    let max = acc.iter().cloned().fold(0.0f64, f64::max);
    if max > 0.0 {
        acc /= max;
    }
    Ok(SaliencyMap { values: acc })
}

/// One exported embedding row.
#[derive(Debug, Clone, Serialize)]
pub struct EmbeddingRow {
    pub sample_id: String,
    pub is_fake: bool,
    pub identity: Option<String>,
    pub source_id: Option<String>,
    pub target_id: Option<String>,
    pub embedding: Vec<f64>,
}

/// Unit-normalized embeddings of every record in the manifest.
pub fn export_embeddings(
    extractor: &dyn Embedder,
    manifest: &DatasetManifest,
    store: &dyn ImageStore,
) -> Result<Vec<EmbeddingRow>, EvalError> {
    let mut rows = Vec::with_capacity(manifest.records().len());
    for record in manifest.records() {
        let z = extractor.embed(&store.load(&record.image_ref)?)?;
        let norm = z.dot(&z).sqrt();
        let z = if norm > 0.0 { z / norm } else { z };
        rows.push(EmbeddingRow {
            sample_id: record.image_ref.clone(),
            is_fake: record.is_fake,
            identity: record.identity.clone(),
            source_id: record.source_id.clone(),
            target_id: record.target_id.clone(),
            embedding: z.to_vec(),
        });
    }
    Ok(rows)
}

/// CSV rendering of an embedding export: metadata columns then the vector.
pub fn embeddings_csv(rows: &[EmbeddingRow]) -> String {
    let mut out = String::from("sample_id,is_fake,identity,source_id,target_id,embedding\n");
    for row in rows {
        let vec_str: Vec<String> = row.embedding.iter().map(|v| format!("{v}")).collect();
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            row.sample_id,
            u8::from(row.is_fake),
            row.identity.as_deref().unwrap_or(""),
            row.source_id.as_deref().unwrap_or(""),
            row.target_id.as_deref().unwrap_or(""),
            vec_str.join(";"),
        ));
    }
    out
}
