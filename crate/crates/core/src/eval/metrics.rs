//! Frame-level detection metrics: ROC/AUC and the EER threshold.
//!
//! Orientation is fixed crate-wide: real is the positive class and lower
//! scores indicate fakes, so AUC is the probability that a random real
//! outscores a random fake (ties count one half).

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("need both real and fake samples")]
    SingleClassOnly,
    #[error("scores must be finite, got {0}")]
    NonFiniteScore(f64),
    #[error("no real image available for identity `{0}`")]
    MissingCounterpart(String),
    #[error("JPEG codec failure: {0}")]
    CodecFailure(String),
    #[error("quality factor {0} outside [1, 100]")]
    QualityOutOfRange(u8),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Store(#[from] crate::store::StoreError),
    #[error(transparent)]
    Attack(#[from] crate::attack::AttackError),
}

/// One scored test sample.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoredSample {
    pub sample_id: String,
    pub is_fake: bool,
    pub score: f64,
}

impl ScoredSample {
    pub fn new(sample_id: impl Into<String>, is_fake: bool, score: f64) -> Self {
        Self { sample_id: sample_id.into(), is_fake, score }
    }
}

fn validate(samples: &[ScoredSample]) -> Result<(), EvalError> {
    if let Some(s) = samples.iter().find(|s| !s.score.is_finite()) {
        return Err(EvalError::NonFiniteScore(s.score));
    }
    let reals = samples.iter().filter(|s| !s.is_fake).count();
    if reals == 0 || reals == samples.len() {
        return Err(EvalError::SingleClassOnly);
    }
    Ok(())
}

/// Rank-based AUC with half-weight ties: P(real > fake) + P(real = fake)/2.
pub fn compute_auc(samples: &[ScoredSample]) -> Result<f64, EvalError> {
    validate(samples)?;
    let mut indexed: Vec<(f64, bool)> = samples.iter().map(|s| (s.score, s.is_fake)).collect();
    indexed.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite scores"));
    let n = indexed.len();
    let mut rank_sum_real = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j < n && indexed[j].0 == indexed[i].0 {
            j += 1;
        }
        // average 1-based rank over the tie group [i, j)
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        for item in &indexed[i..j] {
            if !item.1 {
                rank_sum_real += avg_rank;
            }
        }
        i = j;
    }
    let n_real = samples.iter().filter(|s| !s.is_fake).count() as f64;
    let n_fake = n as f64 - n_real;
    Ok((rank_sum_real - n_real * (n_real + 1.0) / 2.0) / (n_real * n_fake))
}

/// Error rates of the "fake iff score < t" rule at a given threshold:
/// false-positive rate over reals and false-negative rate over fakes.
pub fn error_rates_at(samples: &[ScoredSample], threshold: f64) -> (f64, f64) {
    let mut flagged_reals = 0usize;
    let mut passed_fakes = 0usize;
    let mut n_real = 0usize;
    let mut n_fake = 0usize;
    for s in samples {
        if s.is_fake {
            n_fake += 1;
            if s.score >= threshold {
                passed_fakes += 1;
            }
        } else {
            n_real += 1;
            if s.score < threshold {
                flagged_reals += 1;
            }
        }
    }
    (flagged_reals as f64 / n_real as f64, passed_fakes as f64 / n_fake as f64)
}

/// Candidate thresholds: midpoints between adjacent distinct scores plus the
/// two infinities.
fn candidate_thresholds(samples: &[ScoredSample]) -> Vec<f64> {
    let mut scores: Vec<f64> = samples.iter().map(|s| s.score).collect();
    scores.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    scores.dedup();
    let mut candidates = vec![f64::NEG_INFINITY];
    for pair in scores.windows(2) {
        candidates.push((pair[0] + pair[1]) / 2.0);
    }
    candidates.push(f64::INFINITY);
    candidates
}

/// Threshold minimizing |FPR - FNR| over the candidate set, ties resolved
/// toward the lower threshold; returns the threshold and the attained EER.
pub fn compute_eer_threshold(samples: &[ScoredSample]) -> Result<(f64, f64), EvalError> {
    validate(samples)?;
    let mut best_t = f64::NEG_INFINITY;
    let mut best_gap = f64::INFINITY;
    let mut best_eer = 1.0;
    for t in candidate_thresholds(samples) {
        let (fpr, fnr) = error_rates_at(samples, t);
        let gap = (fpr - fnr).abs();
        if gap < best_gap {
            best_gap = gap;
            best_t = t;
            best_eer = (fpr + fnr) / 2.0;
        }
    }
    Ok((best_t, best_eer))
}

/// Full ROC curve (thresholds descending, so FPR/TPR ascend) plus AUC and
/// the EER operating point.
#[derive(Debug, Clone, Serialize)]
pub struct RocReport {
    pub thresholds: Vec<f64>,
    pub tpr: Vec<f64>,
    pub fpr: Vec<f64>,
    pub auc: f64,
    pub eer_threshold: f64,
    pub eer: f64,
}

impl RocReport {
    pub fn from_samples(samples: &[ScoredSample]) -> Result<Self, EvalError> {
        validate(samples)?;
        let mut scores: Vec<f64> = samples.iter().map(|s| s.score).collect();
        scores.sort_by(|a, b| b.partial_cmp(a).expect("finite scores"));
        scores.dedup();
        let n_real = samples.iter().filter(|s| !s.is_fake).count() as f64;
        let n_fake = samples.len() as f64 - n_real;
        let mut thresholds = vec![f64::INFINITY];
        thresholds.extend(scores);
        let mut tpr = Vec::with_capacity(thresholds.len());
        let mut fpr = Vec::with_capacity(thresholds.len());
        for &t in &thresholds {
            // positive class = real; predicted real iff score >= t
            let tp = samples.iter().filter(|s| !s.is_fake && s.score >= t).count() as f64;
            let fp = samples.iter().filter(|s| s.is_fake && s.score >= t).count() as f64;
            tpr.push(tp / n_real);
            fpr.push(fp / n_fake);
        }
        let auc = compute_auc(samples)?;
        let (eer_threshold, eer) = compute_eer_threshold(samples)?;
        Ok(Self { thresholds, tpr, fpr, auc, eer_threshold, eer })
    }

    /// Trapezoidal area under the stored curve; used to cross-check `auc`.
    pub fn trapezoid_area(&self) -> f64 {
        let mut area = 0.0;
        for i in 1..self.fpr.len() {
            area += (self.fpr[i] - self.fpr[i - 1]) * (self.tpr[i] + self.tpr[i - 1]) / 2.0;
        }
        area
    }

    /// Comma-separated `threshold,fpr,tpr` rows.
    pub fn roc_csv(&self) -> String {
        let mut out = String::from("threshold,fpr,tpr\n");
        for i in 0..self.thresholds.len() {
            out.push_str(&format!("{},{},{}\n", self.thresholds[i], self.fpr[i], self.tpr[i]));
        }
        out
    }
}

#[cfg(test)]
pub(crate) mod oracle {
    use super::ScoredSample;

    /// All-pairs AUC: direct count over real×fake pairs with half ties.
    pub fn auc_all_pairs(samples: &[ScoredSample]) -> f64 {
        let reals: Vec<f64> = samples.iter().filter(|s| !s.is_fake).map(|s| s.score).collect();
        let fakes: Vec<f64> = samples.iter().filter(|s| s.is_fake).map(|s| s.score).collect();
        let mut total = 0.0;
        for &r in &reals {
            for &f in &fakes {
                total += if r > f {
                    1.0
                } else if r == f {
                    0.5
                } else {
                    0.0
                };
            }
        }
        total / (reals.len() as f64 * fakes.len() as f64)
    }

    /// Exhaustive EER scan over the same candidate set, coded independently.
    pub fn eer_exhaustive(samples: &[ScoredSample]) -> (f64, f64) {
        let mut scores: Vec<f64> = samples.iter().map(|s| s.score).collect();
        scores.sort_by(|a, b| a.partial_cmp(b).unwrap());
        scores.dedup();
        let mut candidates = vec![f64::NEG_INFINITY, f64::INFINITY];
        for i in 1..scores.len() {
            candidates.push((scores[i - 1] + scores[i]) / 2.0);
        }
        candidates.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut best = (f64::NEG_INFINITY, f64::INFINITY, 1.0);
        for &t in &candidates {
            let (fpr, fnr) = super::error_rates_at(samples, t);
            let gap = (fpr - fnr).abs();
            if gap < best.1 {
                best = (t, gap, (fpr + fnr) / 2.0);
            }
        }
        (best.0, best.2)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn samples(reals: &[f64], fakes: &[f64]) -> Vec<ScoredSample> {
        let mut out = Vec::new();
        for (i, &s) in reals.iter().enumerate() {
            out.push(ScoredSample::new(format!("r{i}"), false, s));
        }
        for (i, &s) in fakes.iter().enumerate() {
            out.push(ScoredSample::new(format!("f{i}"), true, s));
        }
        out
    }

    #[test]
    fn perfect_separation_has_unit_auc() {
        let s = samples(&[0.9, 0.8], &[0.2, 0.1]);
        assert_eq!(compute_auc(&s).unwrap(), 1.0);
    }

    #[test]
    fn all_ties_give_half() {
        let s = samples(&[0.5, 0.5], &[0.5, 0.5]);
        assert_eq!(compute_auc(&s).unwrap(), 0.5);
    }

    #[test]
    fn six_mixed_scores_match_oracle() {
        let s = samples(&[0.9, 0.4, 0.6], &[0.5, 0.4, 0.1]);
        let auc = compute_auc(&s).unwrap();
        let expect = oracle::auc_all_pairs(&s);
        assert!((auc - expect).abs() < 1e-12, "{auc} vs {expect}");
    }

    #[test]
    fn auc_matches_all_pairs_oracle_randomized() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..50 {
            let n_real = rng.random_range(1..40);
            let n_fake = rng.random_range(1..40);
            // coarse grid makes ties frequent
            let reals: Vec<f64> = (0..n_real).map(|_| rng.random_range(0..20) as f64 / 20.0).collect();
            let fakes: Vec<f64> = (0..n_fake).map(|_| rng.random_range(0..20) as f64 / 20.0).collect();
            let s = samples(&reals, &fakes);
            let fast = compute_auc(&s).unwrap();
            let slow = oracle::auc_all_pairs(&s);
            assert!((fast - slow).abs() < 1e-9, "{fast} vs {slow}");
        }
    }

    #[test]
    fn auc_invariant_under_monotone_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let reals: Vec<f64> = (0..25).map(|_| rng.random_range(0.0..1.0)).collect();
        let fakes: Vec<f64> = (0..25).map(|_| rng.random_range(0.0..1.0)).collect();
        let base = compute_auc(&samples(&reals, &fakes)).unwrap();
        let squash = |v: f64| (3.0 * v - 1.0).tanh();
        let transformed = compute_auc(&samples(
            &reals.iter().map(|&v| squash(v)).collect::<Vec<_>>(),
            &fakes.iter().map(|&v| squash(v)).collect::<Vec<_>>(),
        ))
        .unwrap();
        assert!((base - transformed).abs() < 1e-12);
    }

    #[test]
    fn single_class_is_rejected() {
        let only_reals = samples(&[0.4, 0.9], &[]);
        assert!(matches!(compute_auc(&only_reals), Err(EvalError::SingleClassOnly)));
        assert!(matches!(compute_eer_threshold(&only_reals), Err(EvalError::SingleClassOnly)));
    }

    #[test]
    fn eer_on_separated_classes_is_midpoint() {
        let s = samples(&[0.8, 0.9], &[0.1, 0.3]);
        let (t, eer) = compute_eer_threshold(&s).unwrap();
        assert_eq!(eer, 0.0);
        assert!((t - 0.55).abs() < 1e-12, "threshold {t}");
    }

    #[test]
    fn eer_interleaved_symmetric_takes_lowest_threshold() {
        let s = samples(&[0.2, 0.4], &[0.3, 0.5]);
        let (t, eer) = compute_eer_threshold(&s).unwrap();
        let (ot, oeer) = oracle::eer_exhaustive(&s);
        assert_eq!(t, ot);
        assert_eq!(eer, oeer);
        assert!((eer - 0.5).abs() < 1e-12);
    }

    #[test]
    fn eer_matches_exhaustive_oracle_randomized() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let n = rng.random_range(2..20);
            let reals: Vec<f64> = (0..n).map(|_| rng.random_range(0..10) as f64 / 10.0).collect();
            let fakes: Vec<f64> = (0..n).map(|_| rng.random_range(0..10) as f64 / 10.0).collect();
            let s = samples(&reals, &fakes);
            let (t, eer) = compute_eer_threshold(&s).unwrap();
            let (ot, oeer) = oracle::eer_exhaustive(&s);
            assert_eq!(t, ot, "threshold mismatch");
            assert_eq!(eer, oeer, "eer mismatch");
        }
    }

    #[test]
    fn roc_curve_is_monotone_and_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let reals: Vec<f64> = (0..30).map(|_| rng.random_range(0.3..1.0)).collect();
        let fakes: Vec<f64> = (0..30).map(|_| rng.random_range(0.0..0.7)).collect();
        let report = RocReport::from_samples(&samples(&reals, &fakes)).unwrap();
        for i in 1..report.tpr.len() {
            assert!(report.tpr[i] >= report.tpr[i - 1]);
            assert!(report.fpr[i] >= report.fpr[i - 1]);
        }
        assert_eq!(*report.tpr.last().unwrap(), 1.0);
        assert_eq!(*report.fpr.last().unwrap(), 1.0);
        assert!((report.trapezoid_area() - report.auc).abs() < 1e-9);
    }
}
