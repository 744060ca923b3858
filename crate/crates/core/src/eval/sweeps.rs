//! Robustness sweeps: JPEG re-encoding quality and perturbation budget.

use rayon::prelude::*;
use serde::Serialize;

use crate::attack::{measure_asr_with_images, AttackBudget, ObjectiveSpec};
use crate::detector::FakeScorer;
use crate::eval::metrics::{EvalError, RocReport, ScoredSample};
use crate::face::FaceImage;
use crate::manifest::{DatasetManifest, SampleRecord};
use crate::store::ImageStore;

/// Re-encodes an image through the JPEG codec at the given quality factor.
/// Works on an in-memory copy; the original file is never touched.
pub fn jpeg_recompress(image: &FaceImage, quality: u8) -> Result<FaceImage, EvalError> {
    if !(1..=100).contains(&quality) {
        return Err(EvalError::QualityOutOfRange(quality));
    }
    let (h, w, c) = image.shape();
    assert_eq!(c, 3, "JPEG sweep expects RGB images");
    let rgb = image::RgbImage::from_raw(w as u32, h as u32, image.to_u8())
        .expect("buffer matches dimensions");
    let mut encoded = Vec::new();
    let encoder = image::codecs::jpeg::JpegEncoder::new_with_quality(&mut encoded, quality);
    rgb.write_with_encoder(encoder)
        .map_err(|e| EvalError::CodecFailure(e.to_string()))?;
    let decoded = image::load_from_memory_with_format(&encoded, image::ImageFormat::Jpeg)
        .map_err(|e| EvalError::CodecFailure(e.to_string()))?
        .into_rgb8();
    Ok(FaceImage::from_u8(decoded.as_raw(), h, w, 3).expect("decoded pixels are in range"))
}

/// Per-quality detection report.
#[derive(Debug, Serialize)]
pub struct QualityPoint {
    pub quality: u8,
    pub auc: f64,
    #[serde(skip)]
    pub roc: RocReport,
}

/// Scores every test record after JPEG re-encoding at each quality factor
/// and reports one ROC per factor.
pub fn jpeg_quality_sweep(
    scorer: &dyn FakeScorer,
    manifest: &DatasetManifest,
    store: &dyn ImageStore,
    qf_list: &[u8],
) -> Result<Vec<QualityPoint>, EvalError> {
    let records: Vec<&SampleRecord> = manifest.test_records().collect();
    let mut out = Vec::with_capacity(qf_list.len());
    for &qf in qf_list {
        if !(1..=100).contains(&qf) {
            return Err(EvalError::QualityOutOfRange(qf));
        }
        let samples: Vec<ScoredSample> = records
            .par_chunks(16)
            .map(|chunk| {
                chunk
                    .iter()
                    .map(|record| {
                        let img = store.load(&record.image_ref)?;
                        let recompressed = jpeg_recompress(&img, qf)?;
                        let score = scorer.score_image(&recompressed)?.value;
                        Ok(ScoredSample::new(record.image_ref.clone(), record.is_fake, score))
                    })
                    .collect::<Result<Vec<_>, EvalError>>()
            })
            .collect::<Result<Vec<_>, EvalError>>()?
            .into_iter()
            .flatten()
            .collect();
        let roc = RocReport::from_samples(&samples)?;
        out.push(QualityPoint { quality: qf, auc: roc.auc, roc });
    }
    Ok(out)
}

/// ASR and distortion at one perturbation budget.
#[derive(Debug, Clone, Serialize)]
pub struct BudgetPoint {
    pub epsilon: f64,
    pub asr: f64,
    /// Mean over attacked images of the max absolute pixel change.
    pub mean_linf: f64,
    /// Mean over attacked images of the root-mean-square pixel change.
    pub mean_rms: f64,
}

/// Runs the ASR protocol at each ε. An ε of zero short-circuits to the
/// unattacked images (ASR 0, no distortion).
pub fn budget_sweep(
    scorer: &dyn FakeScorer,
    fakes: &[SampleRecord],
    reals: &[SampleRecord],
    store: &dyn ImageStore,
    objective: &ObjectiveSpec<'_>,
    base: &AttackBudget,
    epsilons: &[f64],
) -> Result<Vec<BudgetPoint>, EvalError> {
    let mut out = Vec::with_capacity(epsilons.len());
    for &eps in epsilons {
        if eps <= 0.0 {
            out.push(BudgetPoint { epsilon: eps, asr: 0.0, mean_linf: 0.0, mean_rms: 0.0 });
            continue;
        }
        let budget = AttackBudget::linf(eps, base.iterations, base.step_size.min(eps));
        let (report, adv_images) =
            measure_asr_with_images(scorer, fakes, reals, store, objective, &budget)?;
        let mut sum_linf = 0.0;
        let mut sum_rms = 0.0;
        for (sample, adv) in report.samples.iter().zip(&adv_images) {
            let orig = store.load(&sample.sample_id)?;
            sum_linf += adv.linf_distance(&orig);
            let n = orig.pixels().len() as f64;
            sum_rms += (adv.l2_distance(&orig).powi(2) / n).sqrt();
        }
        let n = report.samples.len() as f64;
        out.push(BudgetPoint {
            epsilon: eps,
            asr: report.asr,
            mean_linf: sum_linf / n,
            mean_rms: sum_rms / n,
        });
    }
    Ok(out)
}
