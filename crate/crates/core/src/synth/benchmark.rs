//! Reproducible synthetic benchmark construction: per-identity train reals,
//! test reals, and face swaps over distinct identity pairs.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::identity::IdentitySet;
use crate::manifest::{DatasetManifest, ManifestError, SampleRecord, Split};
use crate::store::{MemStore, StoreError};
use crate::synth::render::{
    render_real, render_swap, sample_attributes, IdentityPrototype, RenderConfig, SwapMechanism,
    SwapSpec, SynthError,
};

#[derive(Debug, Error)]
pub enum BenchmarkError {
    #[error("invalid range: {0}")]
    InvalidRange(String),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub n_ids: usize,
    pub per_id_train: usize,
    pub n_real_test: usize,
    pub n_fake_test: usize,
    /// Inclusive bounds for the identity blend weight toward the source.
    pub lambda_range: (f64, f64),
    pub mechanisms: Vec<SwapMechanism>,
    pub seed: u64,
    pub render: RenderConfig,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            n_ids: 50,
            per_id_train: 10,
            n_real_test: 1000,
            n_fake_test: 1000,
            lambda_range: (0.6, 0.9),
            mechanisms: vec![SwapMechanism::LatentBlend],
            seed: 0,
            render: RenderConfig::default(),
        }
    }
}

impl BenchmarkConfig {
    fn validate(&self) -> Result<(), BenchmarkError> {
        if self.n_ids < 2 {
            return Err(BenchmarkError::InvalidRange(format!(
                "n_ids must be at least 2 (swaps need distinct identities), got {}",
                self.n_ids
            )));
        }
        let (lo, hi) = self.lambda_range;
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
            return Err(BenchmarkError::InvalidRange(format!(
                "lambda_range must satisfy 0 <= lo <= hi <= 1, got [{lo}, {hi}]"
            )));
        }
        if self.n_fake_test > 0 && self.mechanisms.is_empty() {
            return Err(BenchmarkError::InvalidRange(
                "mechanisms must be non-empty when fakes are requested".into(),
            ));
        }
        Ok(())
    }
}

/// A generated benchmark: the manifest plus the rendered pixels.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub manifest: DatasetManifest,
    pub store: MemStore,
    pub prototypes: Vec<IdentityPrototype>,
    /// Per-fake swap provenance keyed by image_ref, in generation order.
    pub fake_specs: Vec<(String, SwapSpec)>,
    pub config: BenchmarkConfig,
}

impl Benchmark {
    /// Persists images (8-bit PNG), the manifest and the generator config
    /// under `dir`.
    pub fn write_to_dir(&self, dir: &Path) -> Result<(), BenchmarkError> {
        std::fs::create_dir_all(dir).map_err(ManifestError::Io)?;
        self.store.write_to_dir(dir)?;
        self.manifest.save(&dir.join("manifest.txt"))?;
        let config = serde_json::to_string_pretty(&self.config).expect("config serializes");
        std::fs::write(dir.join("benchmark_config.json"), config).map_err(ManifestError::Io)?;
        Ok(())
    }
}

/// Builds the full synthetic benchmark deterministically from the seed.
pub fn build_benchmark(config: &BenchmarkConfig) -> Result<Benchmark, BenchmarkError> {
    config.validate()?;
    let cfg = &config.render;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let protos = crate::synth::render::generate_prototypes(config.n_ids, rng.random(), cfg)?;
    let identity_set = IdentitySet::new(protos.iter().map(|p| p.identity.clone()))
        .expect("generated labels are unique");

    let mut store = MemStore::new();
    let mut records = Vec::new();

    for proto in &protos {
        for k in 0..config.per_id_train {
            let attrs = sample_attributes(&mut rng);
            let image_ref = format!("train/{}_{k:02}.png", proto.identity);
            store.insert(&image_ref, render_real(proto, &attrs, cfg)?);
            records.push(SampleRecord::real(image_ref, &proto.identity, Split::Train));
        }
    }

    for i in 0..config.n_real_test {
        let proto = &protos[i % protos.len()];
        let attrs = sample_attributes(&mut rng);
        let image_ref = format!("test/real_{i:05}_{}.png", proto.identity);
        store.insert(&image_ref, render_real(proto, &attrs, cfg)?);
        records.push(SampleRecord::real(image_ref, &proto.identity, Split::Test));
    }

    let (lo, hi) = config.lambda_range;
    let mut fake_specs = Vec::with_capacity(config.n_fake_test);
    for i in 0..config.n_fake_test {
        let src = rng.random_range(0..protos.len());
        let mut tgt = rng.random_range(0..protos.len());
        while tgt == src {
            tgt = rng.random_range(0..protos.len());
        }
        let lambda = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let mechanism = config.mechanisms[i % config.mechanisms.len()];
        let attrs = sample_attributes(&mut rng);
        let spec = SwapSpec {
            source: protos[src].clone(),
            target: protos[tgt].clone(),
            target_attributes: attrs,
            lambda,
            mechanism,
        };
        let image_ref = format!(
            "test/fake_{i:05}_{}_{}_{}.png",
            protos[src].identity,
            protos[tgt].identity,
            mechanism.tag()
        );
        store.insert(&image_ref, render_swap(&spec, cfg)?);
        records.push(SampleRecord::fake(&image_ref, &protos[src].identity, &protos[tgt].identity));
        fake_specs.push((image_ref, spec));
    }

    let manifest = DatasetManifest::new(records, identity_set)?;
    Ok(Benchmark { manifest, store, prototypes: protos, fake_specs, config: config.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::ImageStore;
    use crate::synth::render::AttributeParams;

    fn small_config() -> BenchmarkConfig {
        BenchmarkConfig {
            n_ids: 2,
            per_id_train: 3,
            n_real_test: 4,
            n_fake_test: 4,
            lambda_range: (0.6, 0.9),
            mechanisms: vec![SwapMechanism::LatentBlend, SwapMechanism::MaskedPixelBlend],
            seed: 5,
            render: RenderConfig::default(),
        }
    }

    #[test]
    fn fakes_use_distinct_identity_pairs() {
        let bench = build_benchmark(&small_config()).unwrap();
        let fakes: Vec<_> = bench.manifest.records().iter().filter(|r| r.is_fake).collect();
        assert_eq!(fakes.len(), 4);
        for fake in fakes {
            assert_ne!(fake.source_id, fake.target_id);
        }
    }

    #[test]
    fn benchmark_is_reproducible_from_seed() {
        let a = build_benchmark(&small_config()).unwrap();
        let b = build_benchmark(&small_config()).unwrap();
        assert_eq!(a.manifest.serialize(), b.manifest.serialize());
        for (image_ref, img) in a.store.iter() {
            assert_eq!(img, &b.store.load(image_ref).unwrap(), "image {image_ref} differs");
        }
    }

    #[test]
    fn lambda_one_latent_fakes_equal_source_renders() {
        let mut config = small_config();
        config.lambda_range = (1.0, 1.0);
        config.mechanisms = vec![SwapMechanism::LatentBlend];
        let bench = build_benchmark(&config).unwrap();
        assert_eq!(bench.fake_specs.len(), 4);
        for (image_ref, spec) in &bench.fake_specs {
            let fake_img = bench.store.load(image_ref).unwrap();
            let source_render =
                render_real(&spec.source, &spec.target_attributes, &config.render).unwrap();
            assert_eq!(fake_img, source_render, "{image_ref} differs from its source render");
        }
    }

    #[test]
    fn invalid_ranges_are_rejected() {
        let mut config = small_config();
        config.n_ids = 1;
        assert!(matches!(build_benchmark(&config), Err(BenchmarkError::InvalidRange(_))));
        let mut config = small_config();
        config.lambda_range = (0.9, 0.2);
        assert!(matches!(build_benchmark(&config), Err(BenchmarkError::InvalidRange(_))));
        let mut config = small_config();
        config.mechanisms.clear();
        assert!(matches!(build_benchmark(&config), Err(BenchmarkError::InvalidRange(_))));
    }

    #[test]
    fn train_records_are_real_and_counted() {
        let bench = build_benchmark(&small_config()).unwrap();
        let train: Vec<_> = bench.manifest.train_records().collect();
        assert_eq!(train.len(), 6);
        assert!(train.iter().all(|r| !r.is_fake));
        let _ = AttributeParams::canonical();
    }
}
