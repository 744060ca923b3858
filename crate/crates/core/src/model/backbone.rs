//! Convolutional identity-embedding backbone.
//!
//! Four named conv stages (conv3x3 → SiLU → 2×2 average pool) followed by a
//! `proj` stage flattening into a d-dimensional embedding, optionally unit
//! L2-normalized. Parameter groups can be frozen individually; gradients are
//! available with respect to both input pixels and trainable-stage
//! parameters.

use ndarray::{Array1, Array2, Array3, ArrayViewMutD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::face::FaceImage;
use crate::model::nn::{
    avgpool2, avgpool2_backward, l2_normalize, l2_normalize_backward, silu, silu_backward,
    Conv3x3, Linear,
};
use crate::model::ModelError;

/// Architecture description; serialized into checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Expected input shape (height, width, channels).
    pub input: (usize, usize, usize),
    /// Output channels of each conv stage; each stage halves the spatial side.
    pub stage_channels: Vec<usize>,
    pub embed_dim: usize,
    /// Unit-normalize embeddings (cosine geometry).
    pub normalize: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            input: (crate::face::DEFAULT_SIDE, crate::face::DEFAULT_SIDE, crate::face::DEFAULT_CHANNELS),
            stage_channels: vec![8, 16, 32, 64],
            embed_dim: 128,
            normalize: true,
        }
    }
}

impl BackboneConfig {
    /// Spatial side after all pooling stages.
    fn final_side(&self) -> (usize, usize) {
        let div = 1 << self.stage_channels.len();
        (self.input.0 / div, self.input.1 / div)
    }

    fn flat_dim(&self) -> usize {
        let (h, w) = self.final_side();
        h * w * *self.stage_channels.last().expect("at least one stage")
    }

    fn validate(&self) {
        let div = 1 << self.stage_channels.len();
        assert!(
            self.input.0 % div == 0 && self.input.1 % div == 0,
            "input sides must be divisible by 2^stages"
        );
        assert!(!self.stage_channels.is_empty() && self.embed_dim > 0);
    }
}

/// Read-only embedding extraction; implemented by backbones and test doubles.
pub trait Embedder: Sync {
    fn embed_dim(&self) -> usize;
    fn embed(&self, image: &FaceImage) -> Result<Array1<f64>, ModelError>;
}

/// Embedders that also expose input gradients of linear functionals of the
/// embedding — enough to differentiate any scalar objective built on it.
pub trait GradEmbedder: Embedder {
    /// Returns the embedding and `d<z(x), upstream>/dx`.
    fn embed_with_input_grad(
        &self,
        image: &FaceImage,
        upstream: &Array1<f64>,
    ) -> Result<(Array1<f64>, Array3<f64>), ModelError>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvBackbone {
    config: BackboneConfig,
    stages: Vec<Conv3x3>,
    proj: Linear,
    trainable: Vec<bool>, // one flag per conv stage plus the proj group
}

pub(crate) struct StageCache {
    col: Array2<f64>,
    pre_act: Array3<f64>,
    in_shape: (usize, usize),
}

/// Activations retained by a forward pass for backpropagation. `start` is
/// the index of the first executed stage; earlier (frozen) stages may have
/// been skipped by resuming from a cached intermediate activation.
pub struct BackboneCache {
    start: usize,
    stages: Vec<StageCache>,
    flat: Array1<f64>,
    emb: Array1<f64>,
    norm: f64,
}

impl BackboneCache {
    pub fn embedding(&self) -> &Array1<f64> {
        &self.emb
    }
}

/// Per-group parameter gradients; `None` for frozen groups.
pub struct BackboneGrads {
    pub(crate) stages: Vec<Option<(Array2<f64>, Array1<f64>)>>,
    pub(crate) proj: Option<(Array2<f64>, Array1<f64>)>,
}

impl ConvBackbone {
    /// He-style random initialization from the seed.
    pub fn new(config: BackboneConfig, seed: u64) -> Self {
        config.validate();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |scale: f64| -> f64 {
            let v: f64 = StandardNormal.sample(&mut rng);
            v * scale
        };
        let mut stages = Vec::new();
        let mut cin = config.input.2;
        for &cout in &config.stage_channels {
            let mut conv = Conv3x3::new(cin, cout);
            let scale = (2.0 / (9 * cin) as f64).sqrt();
            for v in conv.w.iter_mut() {
                *v = draw(scale);
            }
            stages.push(conv);
            cin = cout;
        }
        let mut proj = Linear::new(config.flat_dim(), config.embed_dim);
        let scale = (2.0 / config.flat_dim() as f64).sqrt();
        for v in proj.w.iter_mut() {
            *v = draw(scale);
        }
        let trainable = vec![true; config.stage_channels.len() + 1];
        Self { config, stages, proj, trainable }
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    /// Ordered parameter-group names: `stage1..stageN` then `proj`.
    pub fn stage_names(&self) -> Vec<String> {
        let mut names: Vec<String> =
            (1..=self.stages.len()).map(|i| format!("stage{i}")).collect();
        names.push("proj".to_string());
        names
    }

    pub fn trainable_mask(&self) -> &[bool] {
        &self.trainable
    }

    /// Marks exactly the named groups trainable. Unknown names error.
    pub fn set_trainable(&mut self, open_stages: &[String]) -> Result<(), ModelError> {
        let names = self.stage_names();
        for name in open_stages {
            if !names.contains(name) {
                return Err(ModelError::UnknownStage(name.clone()));
            }
        }
        self.trainable = names.iter().map(|n| open_stages.contains(n)).collect();
        Ok(())
    }

    pub fn freeze_all(&mut self) {
        self.trainable = vec![false; self.trainable.len()];
    }

    fn check_shape(&self, image: &FaceImage) -> Result<(), ModelError> {
        if image.shape() != self.config.input {
            return Err(ModelError::ShapeMismatch { expected: self.config.input, got: image.shape() });
        }
        Ok(())
    }

    /// Forward pass retaining the caches needed for backprop.
    pub fn forward_cache(&self, image: &FaceImage) -> Result<BackboneCache, ModelError> {
        self.check_shape(image)?;
        Ok(self.forward_cache_from(Self::center_input(image), 0))
    }

    /// Pixels are shifted to zero-mean range before the first convolution so
    /// embeddings are not dominated by the global brightness response.
    fn center_input(image: &FaceImage) -> Array3<f64> {
        image.pixels().mapv(|v| v - 0.5)
    }

    /// Runs stages `[0, upto)` only, returning the activation feeding stage
    /// `upto` (for `upto = 0` that is the centered input). Used to cache the
    /// frozen prefix during partial finetuning.
    pub(crate) fn forward_prefix(&self, image: &FaceImage, upto: usize) -> Result<Array3<f64>, ModelError> {
        self.check_shape(image)?;
        debug_assert!(upto <= self.stages.len());
        let mut x = Self::center_input(image);
        for conv in &self.stages[..upto] {
            x = avgpool2(&silu(&conv.forward(&x).0));
        }
        Ok(x)
    }

    /// Completes the forward pass from the activation feeding stage `start`
    /// (as produced by [`forward_prefix`](Self::forward_prefix)).
    pub(crate) fn forward_cache_from(&self, mut x: Array3<f64>, start: usize) -> BackboneCache {
        let mut caches = Vec::with_capacity(self.stages.len() - start);
        for conv in &self.stages[start..] {
            let in_shape = (x.dim().0, x.dim().1);
            let (pre_act, col) = conv.forward(&x);
            let activated = silu(&pre_act);
            x = avgpool2(&activated);
            caches.push(StageCache { col, pre_act, in_shape });
        }
        let flat_len = x.len();
        let flat = x.into_shape_with_order(flat_len).expect("contiguous").to_owned();
        let raw = self.proj.forward(&flat);
        let (emb, norm) =
            if self.config.normalize { l2_normalize(&raw) } else { (raw.clone(), 0.0) };
        BackboneCache { start, stages: caches, flat, emb, norm }
    }

    /// Backward pass from an embedding-space gradient. Parameter gradients
    /// are accumulated into `grads` for trainable groups when provided; the
    /// input gradient is returned when `want_input` is set.
    pub fn backward(
        &self,
        cache: &BackboneCache,
        d_emb: &Array1<f64>,
        mut grads: Option<&mut BackboneGrads>,
        want_input: bool,
    ) -> Option<Array3<f64>> {
        assert!(
            !want_input || cache.start == 0,
            "input gradients require a full forward pass"
        );
        let d_raw = if self.config.normalize {
            l2_normalize_backward(&cache.emb, cache.norm, d_emb)
        } else {
            d_emb.clone()
        };
        let want_proj = grads.as_ref().is_some_and(|_| self.trainable[self.stages.len()]);
        let (d_flat, proj_grads) = self.proj.backward(&cache.flat, &d_raw, want_proj);
        if let (Some(g), Some((dw, db))) = (grads.as_deref_mut(), proj_grads) {
            accumulate2(&mut g.proj, dw, db);
        }
        let (h_last, w_last) = {
            let div = 1 << self.stages.len();
            (self.config.input.0 / div, self.config.input.1 / div)
        };
        let c_last = *self.config.stage_channels.last().unwrap();
        let mut dy = d_flat
            .into_shape_with_order((h_last, w_last, c_last))
            .expect("flat gradient reshapes to final activation");
        for (idx, conv) in self.stages.iter().enumerate().rev().take(self.stages.len() - cache.start) {
            let cache_s = &cache.stages[idx - cache.start];
            let (h_in, w_in) = cache_s.in_shape;
            let d_pool_in = avgpool2_backward(&dy, h_in, w_in);
            let d_pre = silu_backward(&cache_s.pre_act, &d_pool_in);
            let want_params = grads.as_ref().is_some_and(|_| self.trainable[idx]);
            let need_dx = idx > cache.start || want_input;
            if !need_dx && !want_params {
                return None;
            }
            let (dx, param_grads) = conv.backward(&cache_s.col, &d_pre, want_params);
            if let (Some(g), Some((dw, db))) = (grads.as_deref_mut(), param_grads) {
                accumulate2(&mut g.stages[idx], dw, db);
            }
            dy = dx;
        }
        want_input.then_some(dy)
    }

    /// Embedding of one image (unit-norm when normalization is enabled).
    pub fn embed_internal(&self, image: &FaceImage) -> Result<Array1<f64>, ModelError> {
        Ok(self.forward_cache(image)?.emb.clone())
    }

    pub fn zero_grads(&self) -> BackboneGrads {
        BackboneGrads { stages: self.stages.iter().map(|_| None).collect(), proj: None }
    }

    /// All parameters flattened in stage order; bit-exact round-trip with
    /// [`load_flat`](Self::load_flat).
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for conv in &self.stages {
            out.extend(conv.w.iter());
            out.extend(conv.b.iter());
        }
        out.extend(self.proj.w.iter());
        out.extend(self.proj.b.iter());
        out
    }

    pub fn load_flat(&mut self, data: &[f64]) -> Result<(), ModelError> {
        let expected: usize = self
            .stages
            .iter()
            .map(|c| c.w.len() + c.b.len())
            .sum::<usize>()
            + self.proj.w.len()
            + self.proj.b.len();
        if data.len() != expected {
            return Err(ModelError::ParameterCount { expected, got: data.len() });
        }
        let mut it = data.iter();
        for conv in &mut self.stages {
            for v in conv.w.iter_mut() {
                *v = *it.next().unwrap();
            }
            for v in conv.b.iter_mut() {
                *v = *it.next().unwrap();
            }
        }
        for v in self.proj.w.iter_mut() {
            *v = *it.next().unwrap();
        }
        for v in self.proj.b.iter_mut() {
            *v = *it.next().unwrap();
        }
        Ok(())
    }

    /// Mutable views of trainable tensors, ordered to match
    /// [`trainable_grads`](Self::trainable_grads).
    pub(crate) fn trainable_tensors_mut(&mut self) -> Vec<ArrayViewMutD<'_, f64>> {
        let n_stages = self.stages.len();
        let mut out = Vec::new();
        for (idx, conv) in self.stages.iter_mut().enumerate() {
            if self.trainable[idx] {
                out.push(conv.w.view_mut().into_dyn());
                out.push(conv.b.view_mut().into_dyn());
            }
        }
        if self.trainable[n_stages] {
            out.push(self.proj.w.view_mut().into_dyn());
            out.push(self.proj.b.view_mut().into_dyn());
        }
        out
    }

    /// Gradient tensors for trainable groups in the same order as
    /// [`trainable_tensors_mut`](Self::trainable_tensors_mut). Frozen groups
    /// and never-touched gradients yield zero tensors.
    pub(crate) fn trainable_grads(&self, grads: &BackboneGrads) -> Vec<ndarray::ArrayD<f64>> {
        let mut out = Vec::new();
        for (idx, conv) in self.stages.iter().enumerate() {
            if self.trainable[idx] {
                match &grads.stages[idx] {
                    Some((dw, db)) => {
                        out.push(dw.clone().into_dyn());
                        out.push(db.clone().into_dyn());
                    }
                    None => {
                        out.push(Array2::<f64>::zeros(conv.w.dim()).into_dyn());
                        out.push(Array1::<f64>::zeros(conv.b.dim()).into_dyn());
                    }
                }
            }
        }
        if self.trainable[self.stages.len()] {
            match &grads.proj {
                Some((dw, db)) => {
                    out.push(dw.clone().into_dyn());
                    out.push(db.clone().into_dyn());
                }
                None => {
                    out.push(Array2::<f64>::zeros(self.proj.w.dim()).into_dyn());
                    out.push(Array1::<f64>::zeros(self.proj.b.dim()).into_dyn());
                }
            }
        }
        out
    }

    /// Per-stage flattened parameters, for frozen-contract assertions.
    pub fn stage_params(&self, name: &str) -> Option<Vec<f64>> {
        let names = self.stage_names();
        let idx = names.iter().position(|n| n == name)?;
        if idx < self.stages.len() {
            let conv = &self.stages[idx];
            Some(conv.w.iter().chain(conv.b.iter()).copied().collect())
        } else {
            Some(self.proj.w.iter().chain(self.proj.b.iter()).copied().collect())
        }
    }
}

fn accumulate2(
    slot: &mut Option<(Array2<f64>, Array1<f64>)>,
    dw: Array2<f64>,
    db: Array1<f64>,
) {
    match slot {
        Some((w, b)) => {
            *w += &dw;
            *b += &db;
        }
        None => *slot = Some((dw, db)),
    }
}

impl Embedder for ConvBackbone {
    fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    fn embed(&self, image: &FaceImage) -> Result<Array1<f64>, ModelError> {
        self.embed_internal(image)
    }
}

impl GradEmbedder for ConvBackbone {
    fn embed_with_input_grad(
        &self,
        image: &FaceImage,
        upstream: &Array1<f64>,
    ) -> Result<(Array1<f64>, Array3<f64>), ModelError> {
        let cache = self.forward_cache(image)?;
        let dx = self
            .backward(&cache, upstream, None, true)
            .expect("input gradient requested");
        Ok((cache.emb, dx))
    }
}
