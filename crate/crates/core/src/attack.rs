//! Grey-box evasion attacks against the confusion detector, realized as the
//! basic iterative method (sign-gradient steps projected onto an L∞ ball and
//! the valid pixel box), plus the attack-success-rate protocol.

use ndarray::{Array1, Array3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::{classify, FakeScorer, Verdict};
use crate::face::FaceImage;
use crate::manifest::{DatasetManifest, SampleRecord};
use crate::model::{
    finetune_attention, GradEmbedder, IdentificationModel, ModelError, TrainConfig,
};
use crate::store::ImageStore;

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("invalid attack budget: {0}")]
    InvalidBudget(String),
    #[error("no fake was correctly detected at the operating threshold")]
    NoCorrectlyDetectedFakes,
    #[error("no real image of source identity `{0}` available as attack reference")]
    NoReferenceReal(String),
    #[error("unattacked score set unusable: {0}")]
    ScoreSetInvalid(String),
    #[error("identity `{0}` is not part of the detector identity set")]
    UnknownManipulatorId(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Store(#[from] crate::store::StoreError),
    #[error(transparent)]
    Manifest(#[from] crate::manifest::ManifestError),
}

/// Perturbation budget: L∞ bound, iteration count and per-step size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackBudget {
    /// Norm order p; only the L∞ realization is implemented.
    pub norm_order: f64,
    pub epsilon: f64,
    pub iterations: usize,
    pub step_size: f64,
}

impl Default for AttackBudget {
    fn default() -> Self {
        Self {
            norm_order: f64::INFINITY,
            epsilon: 4.0 / 255.0,
            iterations: 20,
            step_size: 1.0 / 255.0,
        }
    }
}

impl AttackBudget {
    pub fn linf(epsilon: f64, iterations: usize, step_size: f64) -> Self {
        Self { norm_order: f64::INFINITY, epsilon, iterations, step_size }
    }

    pub fn validate(&self) -> Result<(), AttackError> {
        if self.norm_order != f64::INFINITY {
            return Err(AttackError::InvalidBudget(format!(
                "only the L-infinity norm is implemented, got p={}",
                self.norm_order
            )));
        }
        if self.epsilon <= 0.0 {
            return Err(AttackError::InvalidBudget(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if self.iterations == 0 {
            return Err(AttackError::InvalidBudget("iterations must be at least 1".into()));
        }
        if self.step_size <= 0.0 || self.step_size > self.epsilon {
            return Err(AttackError::InvalidBudget(format!(
                "step_size must lie in (0, epsilon], got {} with epsilon {}",
                self.step_size, self.epsilon
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Maximize,
    Minimize,
}

/// Differentiable scalar objective over images.
pub trait Objective: Sync {
    fn direction(&self) -> Direction;
    fn value_and_grad(&self, image: &FaceImage) -> Result<(f64, Array3<f64>), ModelError>;
}

/// Cosine distance between unit-normalized embeddings of two images.
pub fn embed_distance(
    extractor: &dyn GradEmbedder,
    a: &FaceImage,
    b: &FaceImage,
) -> Result<f64, ModelError> {
    let za = unit(extractor.embed(a)?)?;
    let zb = unit(extractor.embed(b)?)?;
    Ok(1.0 - za.dot(&zb))
}

/// Sum of embedding distances over several extractors (unweighted).
pub fn ensemble_objective(
    extractors: &[&dyn GradEmbedder],
    x: &FaceImage,
    reference: &FaceImage,
) -> Result<f64, ModelError> {
    let mut total = 0.0;
    for e in extractors {
        total += embed_distance(*e, x, reference)?;
    }
    Ok(total)
}

fn unit(z: Array1<f64>) -> Result<Array1<f64>, ModelError> {
    let norm = z.dot(&z).sqrt();
    if norm == 0.0 {
        return Err(ModelError::ZeroVector);
    }
    Ok(z / norm)
}

/// The grey-box attack objectives. Embedding objectives carry a reference
/// real image of the fake's source identity, captured at construction as the
/// reference embedding.
pub enum AttackObjective<'a> {
    /// Ascend the maximum identification probability of a surrogate model.
    MaxProb { surrogate: &'a IdentificationModel },
    /// Descend the cosine distance to the reference in one extractor.
    EmbedDistance { extractor: &'a dyn GradEmbedder, reference: Array1<f64> },
    /// Descend the summed cosine distance over several extractors.
    EnsembleEmbed { members: Vec<(&'a dyn GradEmbedder, Array1<f64>)> },
}

impl<'a> AttackObjective<'a> {
    pub fn max_prob(surrogate: &'a IdentificationModel) -> Self {
        AttackObjective::MaxProb { surrogate }
    }

    pub fn embed_distance(
        extractor: &'a dyn GradEmbedder,
        reference_image: &FaceImage,
    ) -> Result<Self, ModelError> {
        let reference = unit(extractor.embed(reference_image)?)?;
        Ok(AttackObjective::EmbedDistance { extractor, reference })
    }

    pub fn ensemble_embed(
        extractors: &[&'a dyn GradEmbedder],
        reference_image: &FaceImage,
    ) -> Result<Self, ModelError> {
        let members = extractors
            .iter()
            .map(|e| Ok((*e, unit(e.embed(reference_image)?)?)))
            .collect::<Result<Vec<_>, ModelError>>()?;
        Ok(AttackObjective::EnsembleEmbed { members })
    }

    pub fn name(&self) -> &'static str {
        match self {
            AttackObjective::MaxProb { .. } => "max_prob",
            AttackObjective::EmbedDistance { .. } => "embed_distance",
            AttackObjective::EnsembleEmbed { .. } => "ensemble_embed",
        }
    }
}

impl Objective for AttackObjective<'_> {
    fn direction(&self) -> Direction {
        match self {
            AttackObjective::MaxProb { .. } => Direction::Maximize,
            _ => Direction::Minimize,
        }
    }

    fn value_and_grad(&self, image: &FaceImage) -> Result<(f64, Array3<f64>), ModelError> {
        match self {
            AttackObjective::MaxProb { surrogate } => {
                let (dist, grad) = surrogate.max_prob_with_input_grad(image)?;
                Ok((dist.max_prob(), grad))
            }
            AttackObjective::EmbedDistance { extractor, reference } => {
                // d(1 - <z, r>)/dz = -r; extractors keep z unit-normalized
                let upstream = reference.mapv(|v| -v);
                let (z, grad) = extractor.embed_with_input_grad(image, &upstream)?;
                Ok((1.0 - z.dot(reference), grad))
            }
            AttackObjective::EnsembleEmbed { members } => {
                let mut value = 0.0;
                let mut total: Option<Array3<f64>> = None;
                for (extractor, reference) in members {
                    let upstream = reference.mapv(|v| -v);
                    let (z, grad) = extractor.embed_with_input_grad(image, &upstream)?;
                    value += 1.0 - z.dot(reference);
                    total = Some(match total {
                        Some(t) => t + grad,
                        None => grad,
                    });
                }
                Ok((value, total.expect("at least one extractor")))
            }
        }
    }
}

/// Outcome of one BIM run. `best_image` is the iterate with the best
/// objective value seen (the one an adaptive manipulator would keep and the
/// one ASR measurement uses); `final_image` is the last iterate.
#[derive(Debug, Clone)]
pub struct AttackResult {
    pub best_image: FaceImage,
    pub final_image: FaceImage,
    /// Objective value at the start point and after every iteration.
    pub objective_trace: Vec<f64>,
    /// L∞ norm of the applied perturbation (best iterate vs input).
    pub linf_delta: f64,
}

/// Basic iterative method: `iterations` sign-gradient steps of `step_size`,
/// each followed by projection onto the ε-ball around the input intersected
/// with the [0,1] pixel box. Deterministic.
pub fn bim_attack(
    input: &FaceImage,
    objective: &dyn Objective,
    budget: &AttackBudget,
) -> Result<AttackResult, AttackError> {
    budget.validate()?;
    let lo = input.pixels().mapv(|v| (v - budget.epsilon).max(0.0));
    let hi = input.pixels().mapv(|v| (v + budget.epsilon).min(1.0));
    let sign = match objective.direction() {
        Direction::Maximize => 1.0,
        Direction::Minimize => -1.0,
    };
    let better = |a: f64, b: f64| match objective.direction() {
        Direction::Maximize => a > b,
        Direction::Minimize => a < b,
    };

    let mut x = input.clone();
    let (v0, mut grad) = objective.value_and_grad(&x)?;
    let mut trace = Vec::with_capacity(budget.iterations + 1);
    trace.push(v0);
    let mut best_value = v0;
    let mut best = x.clone();

    for it in 0..budget.iterations {
        let mut pixels = x.pixels().clone();
        ndarray::Zip::from(&mut pixels).and(&grad).and(&lo).and(&hi).for_each(|p, &g, &l, &h| {
            *p = (*p + sign * budget.step_size * g.signum() * f64::from(g != 0.0)).clamp(l, h);
        });
        x = FaceImage::from_clamped(pixels);
        let (v, g) = objective.value_and_grad(&x)?;
        trace.push(v);
        if better(v, best_value) {
            best_value = v;
            best = x.clone();
        }
        if it + 1 < budget.iterations {
            grad = g;
        }
    }

    let linf_delta = best.linf_distance(input);
    debug_assert!(linf_delta <= budget.epsilon + 1e-9);
    Ok(AttackResult { best_image: best, final_image: x, objective_trace: trace, linf_delta })
}

/// Which objective to build for each attacked fake; embedding objectives get
/// their per-fake reference (a real image of the fake's source identity)
/// resolved during the ASR run.
pub enum ObjectiveSpec<'a> {
    MaxProb { surrogate: &'a IdentificationModel },
    EmbedDistance { extractor: &'a dyn GradEmbedder },
    EnsembleEmbed { extractors: Vec<&'a dyn GradEmbedder> },
}

impl ObjectiveSpec<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            ObjectiveSpec::MaxProb { .. } => "max_prob",
            ObjectiveSpec::EmbedDistance { .. } => "embed_distance",
            ObjectiveSpec::EnsembleEmbed { .. } => "ensemble_embed",
        }
    }

    fn build<'b>(&'b self, reference: Option<&FaceImage>) -> Result<AttackObjective<'b>, AttackError> {
        match self {
            ObjectiveSpec::MaxProb { surrogate } => Ok(AttackObjective::max_prob(surrogate)),
            ObjectiveSpec::EmbedDistance { extractor } => {
                let r = reference.expect("reference resolved for embed objectives");
                Ok(AttackObjective::embed_distance(*extractor, r)?)
            }
            ObjectiveSpec::EnsembleEmbed { extractors } => {
                let r = reference.expect("reference resolved for embed objectives");
                Ok(AttackObjective::ensemble_embed(extractors, r)?)
            }
        }
    }

    fn needs_reference(&self) -> bool {
        !matches!(self, ObjectiveSpec::MaxProb { .. })
    }
}

/// Pre/post scores of one attacked fake.
#[derive(Debug, Clone, Serialize)]
pub struct AsrSample {
    pub sample_id: String,
    pub pre_score: f64,
    pub post_score: f64,
    pub evaded: bool,
}

/// Attack-success-rate measurement outcome.
#[derive(Debug, Clone, Serialize)]
pub struct AsrReport {
    pub objective: String,
    pub budget: AttackBudget,
    pub threshold: f64,
    pub eer: f64,
    pub n_attacked: usize,
    pub n_evaded: usize,
    pub asr: f64,
    pub samples: Vec<AsrSample>,
}

impl AsrReport {
    /// Structured text rendering: headline numbers then per-sample rows.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("objective {}\n", self.objective));
        out.push_str(&format!(
            "budget epsilon={} iterations={} step_size={}\n",
            self.budget.epsilon, self.budget.iterations, self.budget.step_size
        ));
        out.push_str(&format!("threshold {}\n", self.threshold));
        out.push_str(&format!("eer {}\n", self.eer));
        out.push_str(&format!("n_attacked {}\n", self.n_attacked));
        out.push_str(&format!("n_evaded {}\n", self.n_evaded));
        out.push_str(&format!("asr {}\n", self.asr));
        out.push_str("sample_id,pre_score,post_score,evaded\n");
        for s in &self.samples {
            out.push_str(&format!("{},{},{},{}\n", s.sample_id, s.pre_score, s.post_score, u8::from(s.evaded)));
        }
        out
    }
}

/// The ASR protocol: score the unattacked reals and fakes, fix the EER
/// threshold, attack every fake the detector caught, and count the fraction
/// whose best-iterate score lands strictly above the threshold.
pub fn measure_asr(
    scorer: &dyn FakeScorer,
    fakes: &[SampleRecord],
    reals: &[SampleRecord],
    store: &dyn ImageStore,
    objective: &ObjectiveSpec<'_>,
    budget: &AttackBudget,
) -> Result<AsrReport, AttackError> {
    measure_asr_with_images(scorer, fakes, reals, store, objective, budget).map(|(r, _)| r)
}

/// Same protocol, additionally yielding each attacked fake's adversarial
/// image (kept best iterate), aligned with `report.samples`.
pub fn measure_asr_with_images(
    scorer: &dyn FakeScorer,
    fakes: &[SampleRecord],
    reals: &[SampleRecord],
    store: &dyn ImageStore,
    objective: &ObjectiveSpec<'_>,
    budget: &AttackBudget,
) -> Result<(AsrReport, Vec<FaceImage>), AttackError> {
    budget.validate()?;
    let mut scored = Vec::with_capacity(fakes.len() + reals.len());
    let score_of = |record: &SampleRecord| -> Result<f64, AttackError> {
        let img = store.load(&record.image_ref)?;
        Ok(scorer.score_image(&img)?.value)
    };
    for r in reals {
        scored.push(crate::eval::ScoredSample::new(r.image_ref.clone(), false, score_of(r)?));
    }
    let mut fake_scores = Vec::with_capacity(fakes.len());
    for f in fakes {
        let s = score_of(f)?;
        fake_scores.push(s);
        scored.push(crate::eval::ScoredSample::new(f.image_ref.clone(), true, s));
    }
    let (threshold, eer) = crate::eval::compute_eer_threshold(&scored)
        .map_err(|e| AttackError::ScoreSetInvalid(e.to_string()))?;

    let detected: Vec<(usize, f64)> = fakes
        .iter()
        .enumerate()
        .filter(|&(i, _)| {
            classify(
                crate::detector::DetectionScore {
                    value: fake_scores[i],
                    metric: crate::detector::ScoreMetric::Max,
                },
                threshold,
            ) == Verdict::Fake
        })
        .map(|(i, _)| (i, fake_scores[i]))
        .collect();
    if detected.is_empty() {
        return Err(AttackError::NoCorrectlyDetectedFakes);
    }

    let attacked: Vec<(AsrSample, FaceImage)> = detected
        .par_chunks(4)
        .map(|chunk| {
            chunk
                .iter()
                .map(|&(i, pre_score)| {
                    let record = &fakes[i];
                    let img = store.load(&record.image_ref)?;
                    let reference = if objective.needs_reference() {
                        let source = record
                            .source_id
                            .clone()
                            .ok_or_else(|| AttackError::NoReferenceReal("<missing source_id>".into()))?;
                        let reference_record = reals
                            .iter()
                            .find(|r| r.identity.as_deref() == Some(source.as_str()))
                            .ok_or(AttackError::NoReferenceReal(source))?;
                        Some(store.load(&reference_record.image_ref)?)
                    } else {
                        None
                    };
                    let obj = objective.build(reference.as_ref())?;
                    let result = bim_attack(&img, &obj, budget)?;
                    let post_score = scorer.score_image(&result.best_image)?.value;
                    let sample = AsrSample {
                        sample_id: record.image_ref.clone(),
                        pre_score,
                        post_score,
                        evaded: post_score > threshold,
                    };
                    Ok((sample, result.best_image))
                })
                .collect::<Result<Vec<_>, AttackError>>()
        })
        .collect::<Result<Vec<_>, AttackError>>()?
        .into_iter()
        .flatten()
        .collect();

    let (samples, images): (Vec<AsrSample>, Vec<FaceImage>) = attacked.into_iter().unzip();
    let n_attacked = samples.len();
    let n_evaded = samples.iter().filter(|s| s.evaded).count();
    let report = AsrReport {
        objective: objective.name().to_string(),
        budget: *budget,
        threshold,
        eer,
        n_attacked,
        n_evaded,
        asr: n_evaded as f64 / n_attacked as f64,
        samples,
    };
    Ok((report, images))
}

/// Trains the adaptive manipulator's surrogate: the same attention-based
/// finetuning pipeline restricted to the manipulator's identity subset and
/// their own images.
pub fn train_adaptive_surrogate(
    manipulator_ids: &[String],
    images: &DatasetManifest,
    store: &dyn ImageStore,
    backbone: &crate::model::ConvBackbone,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<IdentificationModel, AttackError> {
    for id in manipulator_ids {
        if !images.identity_set().contains(id) {
            return Err(AttackError::UnknownManipulatorId(id.clone()));
        }
    }
    let subset = crate::identity::IdentitySet::new(manipulator_ids.iter().cloned())
        .map_err(|e| AttackError::ScoreSetInvalid(e.to_string()))?;
    let records: Vec<SampleRecord> = images
        .records()
        .iter()
        .filter(|r| {
            !r.is_fake && r.identity.as_ref().map(|id| subset.contains(id)).unwrap_or(false)
        })
        .cloned()
        .collect();
    let manifest = DatasetManifest::new(records, subset)?;
    let run = finetune_attention(&manifest, store, backbone, cfg, seed)?;
    Ok(run.model)
}
