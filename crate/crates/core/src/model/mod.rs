//! Identity-embedding backbones, the K-way identification model, training
//! procedures and the attention-based finetuning defense.

mod backbone;
mod mask;
pub(crate) mod nn;
mod train;

pub use backbone::{BackboneCache, BackboneConfig, BackboneGrads, ConvBackbone, Embedder, GradEmbedder};
pub use mask::{apply_mask, attention_mask_from_gradients, AttentionMask, MaskBlock};
pub use train::{
    finetune_attention, pretrain_backbone, train_baseline, PretrainConfig, LR_DECAY_INTERVAL_EPOCHS,
};

use ndarray::{Array1, Array3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::face::FaceImage;
use crate::identity::IdentitySet;
use crate::model::nn::{softmax, Linear};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("input shape {got:?} does not match backbone input {expected:?}")]
    ShapeMismatch { expected: (usize, usize, usize), got: (usize, usize, usize) },
    #[error("unknown parameter group `{0}`")]
    UnknownStage(String),
    #[error("parameter blob has {got} values, expected {expected}")]
    ParameterCount { expected: usize, got: usize },
    #[error("target index {index} out of range for {k} classes")]
    IndexOutOfRange { index: usize, k: usize },
    #[error("alpha {0} outside [0, 1)")]
    AlphaOutOfRange(f64),
    #[error("train split contains fake image `{0}`")]
    FakeInTrainSet(String),
    #[error("identity `{0}` has no training images")]
    EmptyIdentity(String),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("embedding has zero norm")]
    ZeroVector,
    #[error("store error: {0}")]
    Store(#[from] crate::store::StoreError),
}

/// Softmax output of the identification model over K identities.
#[derive(Debug, Clone, PartialEq)]
pub struct IdProbDist {
    probs: Array1<f64>,
}

impl IdProbDist {
    /// Validates the simplex constraints (entries in [0,1], sum within 1e-6).
    pub fn new(probs: Array1<f64>) -> Result<Self, ModelError> {
        if probs.is_empty() {
            return Err(ModelError::InvalidConfig("probability vector is empty".into()));
        }
        let sum: f64 = probs.sum();
        if !probs.iter().all(|&p| (0.0..=1.0 + 1e-9).contains(&p)) || (sum - 1.0).abs() > 1e-6 {
            return Err(ModelError::InvalidConfig(format!(
                "probabilities violate the simplex (sum {sum})"
            )));
        }
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &Array1<f64> {
        &self.probs
    }

    pub fn k(&self) -> usize {
        self.probs.len()
    }

    pub fn max_prob(&self) -> f64 {
        self.probs.fold(f64::NEG_INFINITY, |a, &b| a.max(b))
    }

    /// Index of the most likely identity (first on ties).
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }
}

/// Smoothed supervision target mixing a one-hot label with the uniform
/// distribution: the target class gets `1 - alpha + alpha/K`, every other
/// class `alpha/K`.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothedLabel {
    pub target_index: usize,
    pub alpha: f64,
    values: Array1<f64>,
}

impl SmoothedLabel {
    pub fn values(&self) -> &Array1<f64> {
        &self.values
    }
}

/// Builds the smoothed label vector for `target_index` among `k` classes.
pub fn smooth_label(target_index: usize, k: usize, alpha: f64) -> Result<SmoothedLabel, ModelError> {
    if target_index >= k {
        return Err(ModelError::IndexOutOfRange { index: target_index, k });
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(ModelError::AlphaOutOfRange(alpha));
    }
    let off = alpha / k as f64;
    let mut values = Array1::from_elem(k, off);
    // Writing the target as 1 - (K-1)*off keeps the total at exactly one.
    values[target_index] = 1.0 - off * (k as f64 - 1.0);
    Ok(SmoothedLabel { target_index, alpha, values })
}

/// Training hyperparameters. Field names are stable: they appear verbatim in
/// serialized run configs and checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub initial_lr: f64,
    /// Multiplicative learning-rate decay applied every
    /// [`LR_DECAY_INTERVAL_EPOCHS`] epochs.
    pub lr_decay: f64,
    pub optimizer: String,
    /// Epoch interval at which the mask-generating snapshot model refreshes.
    pub mask_refresh_epochs: usize,
    /// Label-smoothing weight for masked training; 0 keeps hard labels.
    pub alpha: f64,
    /// Occlusion blocks per attention mask; 0 disables masking.
    pub n_blocks: usize,
    /// Backbone parameter groups opened during finetuning; empty = frozen.
    pub trainable_stages: Vec<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 128,
            initial_lr: 0.001,
            lr_decay: 0.1,
            optimizer: "adam".to_string(),
            mask_refresh_epochs: 5,
            alpha: 0.5,
            n_blocks: 10,
            trainable_stages: Vec::new(),
        }
    }
}

impl TrainConfig {
    /// Defaults for the attention-based finetuning defense: final conv stage
    /// and the projection open, masking and label smoothing on.
    pub fn finetune_default() -> Self {
        Self { trainable_stages: vec!["stage4".into(), "proj".into()], ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.epochs == 0 || self.batch_size == 0 || self.mask_refresh_epochs == 0 {
            return Err(ModelError::InvalidConfig(
                "epochs, batch_size and mask_refresh_epochs must be positive".into(),
            ));
        }
        if self.initial_lr <= 0.0 || self.lr_decay <= 0.0 {
            return Err(ModelError::InvalidConfig("learning rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(ModelError::InvalidConfig(format!(
                "alpha must lie in [0, 1), got {}",
                self.alpha
            )));
        }
        if self.optimizer != "adam" {
            return Err(ModelError::InvalidConfig(format!(
                "unsupported optimizer `{}`",
                self.optimizer
            )));
        }
        Ok(())
    }
}

/// A trained K-way face identification model: embedding backbone plus an
/// affine head mapped through softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentificationModel {
    pub backbone: ConvBackbone,
    pub(crate) head: Linear,
    pub identity_set: IdentitySet,
}

impl IdentificationModel {
    pub(crate) fn new(backbone: ConvBackbone, head: Linear, identity_set: IdentitySet) -> Self {
        debug_assert_eq!(head.w.dim(), (identity_set.len(), backbone.config().embed_dim));
        Self { backbone, head, identity_set }
    }

    pub fn k(&self) -> usize {
        self.identity_set.len()
    }

    pub fn logits(&self, image: &FaceImage) -> Result<Array1<f64>, ModelError> {
        let z = self.backbone.embed_internal(image)?;
        Ok(self.head.forward(&z))
    }

    /// Identification probabilities for one image.
    pub fn predict(&self, image: &FaceImage) -> Result<IdProbDist, ModelError> {
        let probs = softmax(&self.logits(image)?);
        IdProbDist::new(probs)
    }

    /// Gradient of one logit with respect to the input pixels.
    pub fn input_grad_of_logit(&self, image: &FaceImage, class: usize) -> Result<Array3<f64>, ModelError> {
        if class >= self.k() {
            return Err(ModelError::IndexOutOfRange { index: class, k: self.k() });
        }
        let cache = self.backbone.forward_cache(image)?;
        let d_emb = self.head.w.row(class).to_owned();
        Ok(self
            .backbone
            .backward(&cache, &d_emb, None, true)
            .expect("input gradient requested"))
    }

    /// Probabilities plus the input gradient of the maximum probability.
    pub fn max_prob_with_input_grad(
        &self,
        image: &FaceImage,
    ) -> Result<(IdProbDist, Array3<f64>), ModelError> {
        let cache = self.backbone.forward_cache(image)?;
        let logits = self.head.forward(cache.embedding());
        let probs = softmax(&logits);
        let c = {
            let mut best = 0;
            for (i, &p) in probs.iter().enumerate() {
                if p > probs[best] {
                    best = i;
                }
            }
            best
        };
        // d p_c / d logits = p_c * (e_c - p)
        let mut dlogits = probs.mapv(|p| -p);
        dlogits[c] += 1.0;
        dlogits *= probs[c];
        let (d_emb, _) = self.head.backward(cache.embedding(), &dlogits, false);
        let dx = self
            .backbone
            .backward(&cache, &d_emb, None, true)
            .expect("input gradient requested");
        Ok((IdProbDist::new(probs)?, dx))
    }

    /// Gradient of `logit[class] - mean(logits)` with respect to the input;
    /// invariant to adding a constant to every logit.
    pub fn input_grad_of_centered_logit(
        &self,
        image: &FaceImage,
        class: usize,
    ) -> Result<Array3<f64>, ModelError> {
        if class >= self.k() {
            return Err(ModelError::IndexOutOfRange { index: class, k: self.k() });
        }
        let cache = self.backbone.forward_cache(image)?;
        let k = self.k() as f64;
        let mut dlogits = Array1::from_elem(self.k(), -1.0 / k);
        dlogits[class] += 1.0;
        let (d_emb, _) = self.head.backward(cache.embedding(), &dlogits, false);
        Ok(self
            .backbone
            .backward(&cache, &d_emb, None, true)
            .expect("input gradient requested"))
    }

    /// Head parameters flattened (weights row-major, then biases).
    pub fn head_params_flat(&self) -> Vec<f64> {
        self.head.w.iter().chain(self.head.b.iter()).copied().collect()
    }

    pub(crate) fn load_head_flat(&mut self, data: &[f64]) -> Result<(), ModelError> {
        let expected = self.head.w.len() + self.head.b.len();
        if data.len() != expected {
            return Err(ModelError::ParameterCount { expected, got: data.len() });
        }
        let mut it = data.iter();
        for v in self.head.w.iter_mut() {
            *v = *it.next().unwrap();
        }
        for v in self.head.b.iter_mut() {
            *v = *it.next().unwrap();
        }
        Ok(())
    }
}
