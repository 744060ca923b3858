//! Face-swap detection scores from identification probability distributions.
//!
//! Every metric shares one orientation: LOWER score means more likely fake.
//! The maximum probability drops when the model is confused; variance and
//! entropy are negated so that flatter (more confused) distributions also
//! score lower.

use serde::{Deserialize, Serialize};

use crate::face::FaceImage;
use crate::model::{IdProbDist, IdentificationModel, ModelError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMetric {
    Max,
    NegVariance,
    NegEntropy,
}

impl ScoreMetric {
    pub fn as_str(self) -> &'static str {
        match self {
            ScoreMetric::Max => "max",
            ScoreMetric::NegVariance => "neg_variance",
            ScoreMetric::NegEntropy => "neg_entropy",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "max" => Some(ScoreMetric::Max),
            "neg_variance" => Some(ScoreMetric::NegVariance),
            "neg_entropy" => Some(ScoreMetric::NegEntropy),
            _ => None,
        }
    }
}

/// A detection score; lower values indicate likely fakes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionScore {
    pub value: f64,
    pub metric: ScoreMetric,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Real,
    Fake,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Real => "real",
            Verdict::Fake => "fake",
        }
    }
}

/// Confusion score of a probability distribution under the chosen metric.
pub fn score(dist: &IdProbDist, metric: ScoreMetric) -> DetectionScore {
    let value = match metric {
        ScoreMetric::Max => dist.max_prob(),
        ScoreMetric::NegVariance => {
            let k = dist.k() as f64;
            let mean = 1.0 / k;
            -dist.probs().iter().map(|&p| (p - mean) * (p - mean)).sum::<f64>() / k
        }
        ScoreMetric::NegEntropy => {
            // entropy in nats with 0·ln 0 = 0
            dist.probs()
                .iter()
                .map(|&p| if p > 0.0 { p * p.ln() } else { 0.0 })
                .sum::<f64>()
        }
    };
    DetectionScore { value, metric }
}

/// Thresholding rule: fake iff the score is strictly below the threshold;
/// ties classify as real.
pub fn classify(score: DetectionScore, threshold: f64) -> Verdict {
    if score.value < threshold {
        Verdict::Fake
    } else {
        Verdict::Real
    }
}

/// Anything that maps an image to a detection score.
pub trait FakeScorer: Sync {
    fn score_image(&self, image: &FaceImage) -> Result<DetectionScore, ModelError>;
}

/// Single identification model scored under one metric.
pub struct ModelDetector<'a> {
    pub model: &'a IdentificationModel,
    pub metric: ScoreMetric,
}

impl<'a> ModelDetector<'a> {
    pub fn new(model: &'a IdentificationModel) -> Self {
        Self { model, metric: ScoreMetric::Max }
    }
}

impl FakeScorer for ModelDetector<'_> {
    fn score_image(&self, image: &FaceImage) -> Result<DetectionScore, ModelError> {
        Ok(score(&self.model.predict(image)?, self.metric))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleStatistic {
    /// Minimum of the per-model max probabilities.
    Min,
    /// Negated spread of the per-model max probabilities; models disagreeing
    /// on an input is evidence of a fake.
    NegRange,
}

/// Several identification models over the same identity set combined through
/// a statistic of their max-probability values.
pub struct DetectorEnsemble<'a> {
    models: Vec<&'a IdentificationModel>,
    statistic: EnsembleStatistic,
}

impl<'a> DetectorEnsemble<'a> {
    pub fn new(models: Vec<&'a IdentificationModel>, statistic: EnsembleStatistic) -> Self {
        assert!(!models.is_empty(), "ensemble needs at least one model");
        let k = models[0].k();
        assert!(models.iter().all(|m| m.k() == k), "ensemble models must share K");
        Self { models, statistic }
    }

    /// Per-model max-probability values for one image.
    pub fn member_values(&self, image: &FaceImage) -> Result<Vec<f64>, ModelError> {
        self.models.iter().map(|m| Ok(m.predict(image)?.max_prob())).collect()
    }
}

/// The ensemble statistic over per-model max-probability values.
pub fn combine_ensemble_values(values: &[f64], statistic: EnsembleStatistic) -> f64 {
    assert!(!values.is_empty());
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    match statistic {
        EnsembleStatistic::Min => min,
        EnsembleStatistic::NegRange => -(max - min),
    }
}

/// Combines per-model max probabilities through the ensemble statistic.
pub fn ensemble_score(
    ensemble: &DetectorEnsemble<'_>,
    image: &FaceImage,
) -> Result<DetectionScore, ModelError> {
    let values = ensemble.member_values(image)?;
    let value = combine_ensemble_values(&values, ensemble.statistic);
    Ok(DetectionScore { value, metric: ScoreMetric::Max })
}

impl FakeScorer for DetectorEnsemble<'_> {
    fn score_image(&self, image: &FaceImage) -> Result<DetectionScore, ModelError> {
        ensemble_score(self, image)
    }
}

/// Models over disjoint identity subsets; the test image is scored by every
/// group and the largest max probability wins (the group actually containing
/// the identity answers confidently).
pub struct SubsetSplitDetector<'a> {
    groups: Vec<&'a IdentificationModel>,
}

impl<'a> SubsetSplitDetector<'a> {
    pub fn new(groups: Vec<&'a IdentificationModel>) -> Self {
        assert!(!groups.is_empty(), "need at least one group model");
        Self { groups }
    }
}

/// Max over groups of per-group max probability.
pub fn subset_split_score(
    split: &SubsetSplitDetector<'_>,
    image: &FaceImage,
) -> Result<DetectionScore, ModelError> {
    let mut best = f64::NEG_INFINITY;
    for model in &split.groups {
        best = best.max(model.predict(image)?.max_prob());
    }
    Ok(DetectionScore { value: best, metric: ScoreMetric::Max })
}

impl FakeScorer for SubsetSplitDetector<'_> {
    fn score_image(&self, image: &FaceImage) -> Result<DetectionScore, ModelError> {
        subset_split_score(self, image)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array1;

    fn dist(values: &[f64]) -> IdProbDist {
        IdProbDist::new(Array1::from_vec(values.to_vec())).unwrap()
    }

    #[test]
    fn max_metric_on_uniform() {
        let d = dist(&[0.1; 10]);
        assert!((score(&d, ScoreMetric::Max).value - 0.1).abs() < 1e-12);
    }

    #[test]
    fn neg_entropy_values() {
        let one_hot = dist(&[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(score(&one_hot, ScoreMetric::NegEntropy).value, 0.0);
        let two_point = dist(&[0.5, 0.5, 0.0, 0.0]);
        let v = score(&two_point, ScoreMetric::NegEntropy).value;
        assert!((v + std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn neg_variance_bounds() {
        let k = 4;
        let one_hot = dist(&[1.0, 0.0, 0.0, 0.0]);
        let v = score(&one_hot, ScoreMetric::NegVariance).value;
        let bound = -((k as f64 - 1.0) / (k as f64 * k as f64));
        assert!((v - bound).abs() < 1e-12);
        let uniform = dist(&[0.25; 4]);
        assert_eq!(score(&uniform, ScoreMetric::NegVariance).value, 0.0);
    }

    #[test]
    fn classify_tie_goes_to_real() {
        let s = DetectionScore { value: 0.5, metric: ScoreMetric::Max };
        assert_eq!(classify(s, 0.5), Verdict::Real);
        assert_eq!(classify(DetectionScore { value: 0.3, metric: ScoreMetric::Max }, 0.5), Verdict::Fake);
        assert_eq!(classify(DetectionScore { value: 0.9, metric: ScoreMetric::Max }, 0.5), Verdict::Real);
    }

    #[test]
    fn verdict_monotone_in_threshold() {
        let s = DetectionScore { value: 0.42, metric: ScoreMetric::Max };
        let mut was_fake = false;
        for t in [0.0, 0.2, 0.42, 0.43, 0.8, 1.0] {
            let fake = classify(s, t) == Verdict::Fake;
            assert!(!was_fake || fake, "raising threshold flipped fake back to real");
            was_fake = fake;
        }
    }

    #[test]
    fn metric_bounds_on_random_simplex_points() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(123);
        for _ in 0..10_000 {
            let k = rng.random_range(2..12);
            let mut raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.0f64..1.0)).collect();
            let sum: f64 = raw.iter().sum();
            raw.iter_mut().for_each(|v| *v /= sum);
            let d = dist(&raw);
            let kf = k as f64;
            let max = score(&d, ScoreMetric::Max).value;
            assert!(max >= 1.0 / kf - 1e-12 && max <= 1.0 + 1e-12);
            let nv = score(&d, ScoreMetric::NegVariance).value;
            assert!(nv <= 1e-12 && nv >= -((kf - 1.0) / (kf * kf)) - 1e-12);
            let ne = score(&d, ScoreMetric::NegEntropy).value;
            assert!(ne <= 1e-12 && ne >= -kf.ln() - 1e-12);
        }
    }

    #[test]
    fn ensemble_statistics_on_fixed_values() {
        let v = [0.9, 0.8, 0.95];
        assert!((combine_ensemble_values(&v, EnsembleStatistic::Min) - 0.8).abs() < 1e-12);
        assert!(
            (combine_ensemble_values(&v, EnsembleStatistic::NegRange) + 0.15).abs() < 1e-12
        );
        // degenerate single member
        assert_eq!(combine_ensemble_values(&[0.7], EnsembleStatistic::Min), 0.7);
        assert_eq!(combine_ensemble_values(&[0.7], EnsembleStatistic::NegRange), 0.0);
        // identical members: range collapses exactly
        assert_eq!(combine_ensemble_values(&[0.6, 0.6, 0.6], EnsembleStatistic::NegRange), 0.0);
        assert_eq!(combine_ensemble_values(&[0.6, 0.6, 0.6], EnsembleStatistic::Min), 0.6);
    }

    #[test]
    fn sharpening_never_decreases_max_score() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let k = rng.random_range(2..8);
            let logits: Vec<f64> = (0..k).map(|_| rng.random_range(-3.0f64..3.0)).collect();
            let softmax = |temp: f64| {
                let scaled: Vec<f64> = logits.iter().map(|&l| l / temp).collect();
                let m = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scaled.iter().map(|&l| (l - m).exp()).collect();
                let s: f64 = e.iter().sum();
                e.into_iter().map(|v| v / s).collect::<Vec<_>>()
            };
            let base = score(&dist(&softmax(1.0)), ScoreMetric::Max).value;
            let sharp = score(&dist(&softmax(0.5)), ScoreMetric::Max).value;
            assert!(sharp >= base - 1e-12);
        }
    }
}
