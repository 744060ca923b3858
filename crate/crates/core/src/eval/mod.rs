//! Evaluation protocols: ROC/AUC/EER, pair-similarity studies, quality and
//! budget sweeps, saliency maps and embedding exports.

mod metrics;
mod plot;
mod study;
mod sweeps;

pub use metrics::{
    compute_auc, compute_eer_threshold, error_rates_at, EvalError, RocReport, ScoredSample,
};
pub use plot::{render_line_chart, Series};
pub use study::{
    embeddings_csv, export_embeddings, pair_similarity_study, smoothgrad_saliency, EmbeddingRow,
    GroupStats, PairSimilarityStudy, SaliencyMap,
};
pub use sweeps::{budget_sweep, jpeg_quality_sweep, jpeg_recompress, BudgetPoint, QualityPoint};

/// Default SmoothGrad sample count.
pub const SMOOTHGRAD_SAMPLES: usize = 25;
/// Default SmoothGrad noise level for inputs in [0,1].
pub const SMOOTHGRAD_SIGMA: f64 = 0.1;
