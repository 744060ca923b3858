//! Training procedures: margin-softmax backbone pretraining, frozen-backbone
//! transfer learning for the identification head, and the attention-based
//! finetuning defense.

use ndarray::{Array1, Array2, ArrayD, ArrayViewMutD, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::face::FaceImage;
use crate::manifest::DatasetManifest;
use crate::model::backbone::{BackboneGrads, ConvBackbone};
use crate::model::mask::{apply_mask, attention_mask_from_gradients, default_block_size};
use crate::model::nn::{cross_entropy, l2_normalize, Linear};
use crate::model::{smooth_label, IdentificationModel, ModelError, TrainConfig};
use crate::store::ImageStore;

/// Learning rate is multiplied by `lr_decay` after every this many epochs.
pub const LR_DECAY_INTERVAL_EPOCHS: usize = 10;

/// Fixed work-chunk size for parallel gradient accumulation; keeping it
/// independent of the thread count makes reductions bit-reproducible.
const PAR_CHUNK: usize = 16;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Adaptive-moment optimizer over an ordered list of tensors.
struct Adam {
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
    t: i32,
}

impl Adam {
    fn new() -> Self {
        Self { m: Vec::new(), v: Vec::new(), t: 0 }
    }

    fn step(&mut self, mut params: Vec<ArrayViewMutD<'_, f64>>, grads: &[ArrayD<f64>], lr: f64) {
        assert_eq!(params.len(), grads.len(), "param/grad list mismatch");
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| ArrayD::zeros(g.dim())).collect();
            self.v = grads.iter().map(|g| ArrayD::zeros(g.dim())).collect();
        }
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t);
        for ((param, grad), (m, v)) in
            params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            ndarray::Zip::from(param)
                .and(grad)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                    *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                });
        }
    }
}

fn lr_at_epoch(cfg_lr: f64, decay: f64, epoch: usize) -> f64 {
    cfg_lr * decay.powi((epoch / LR_DECAY_INTERVAL_EPOCHS) as i32)
}

/// Loads the train split as (image, class index) pairs, enforcing the
/// real-only contract and that no identity is left without samples.
fn load_training_pairs(
    manifest: &DatasetManifest,
    store: &dyn ImageStore,
) -> Result<Vec<(FaceImage, usize)>, ModelError> {
    let ids = manifest.identity_set();
    let mut pairs = Vec::new();
    let mut seen = vec![false; ids.len()];
    for record in manifest.train_records() {
        if record.is_fake {
            return Err(ModelError::FakeInTrainSet(record.image_ref.clone()));
        }
        let identity = record.identity.as_deref().expect("real records carry identity");
        let label = ids
            .index_of(identity)
            .expect("manifest validation guarantees membership");
        seen[label] = true;
        pairs.push((store.load(&record.image_ref)?, label));
    }
    if let Some(missing) = seen.iter().position(|&s| !s) {
        return Err(ModelError::EmptyIdentity(ids.label(missing).unwrap_or("?").to_string()));
    }
    Ok(pairs)
}

/// Small random head initialization shared by baseline and finetuning so the
/// degenerate finetune configuration reproduces the baseline exactly.
fn init_head(embed_dim: usize, k: usize, seed: u64) -> Linear {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x68ea_d000);
    let mut head = Linear::new(embed_dim, k);
    for v in head.w.iter_mut() {
        let n: f64 = StandardNormal.sample(&mut rng);
        *v = 0.01 * n;
    }
    head
}

/// Deterministic parallel embedding of a slice of images.
pub fn embed_all(backbone: &ConvBackbone, images: &[FaceImage]) -> Result<Vec<Array1<f64>>, ModelError> {
    images
        .par_chunks(PAR_CHUNK)
        .map(|chunk| chunk.iter().map(|img| backbone.embed_internal(img)).collect::<Result<Vec<_>, _>>())
        .collect::<Result<Vec<_>, _>>()
        .map(|chunks| chunks.into_iter().flatten().collect())
}

/// Standard transfer learning: the backbone stays frozen and only the
/// classification head is trained with cross-entropy on hard labels.
pub fn train_baseline(
    train: &DatasetManifest,
    store: &dyn ImageStore,
    backbone: &ConvBackbone,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<IdentificationModel, ModelError> {
    cfg.validate()?;
    let pairs = load_training_pairs(train, store)?;
    let k = train.identity_set().len();
    let d = backbone.config().embed_dim;

    let images: Vec<FaceImage> = pairs.iter().map(|(img, _)| img.clone()).collect();
    let labels: Vec<usize> = pairs.iter().map(|&(_, l)| l).collect();
    let embeddings = embed_all(backbone, &images)?;

    let mut head = init_head(d, k, seed);
    let mut adam = Adam::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();

    for epoch in 0..cfg.epochs {
        let lr = lr_at_epoch(cfg.initial_lr, cfg.lr_decay, epoch);
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            let mut dw = Array2::zeros(head.w.dim());
            let mut db = Array1::zeros(head.b.dim());
            for &i in batch {
                let logits = head.forward(&embeddings[i]);
                let target = smooth_label(labels[i], k, 0.0)?;
                let (_, mut dlogits) = cross_entropy(&logits, target.values());
                dlogits *= scale;
                let (_, grads) = head.backward(&embeddings[i], &dlogits, true);
                let (gw, gb) = grads.expect("params requested");
                dw += &gw;
                db += &gb;
            }
            adam.step(
                vec![head.w.view_mut().into_dyn(), head.b.view_mut().into_dyn()],
                &[dw.into_dyn(), db.into_dyn()],
                lr,
            );
        }
    }

    let mut frozen = backbone.clone();
    frozen.freeze_all();
    Ok(IdentificationModel::new(frozen, head, train.identity_set().clone()))
}

/// Outcome of attention-based finetuning.
pub struct FinetuneRun {
    pub model: IdentificationModel,
    /// Number of frozen snapshot models used to generate masks.
    pub snapshots_taken: usize,
}

/// Attention-based finetuning: every training image is occluded at its
/// currently most salient blocks (masks regenerated from a frozen snapshot
/// every `mask_refresh_epochs`), supervision uses smoothed labels, and only
/// the configured backbone stages plus the head receive updates.
pub fn finetune_attention(
    train: &DatasetManifest,
    store: &dyn ImageStore,
    backbone: &ConvBackbone,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<FinetuneRun, ModelError> {
    cfg.validate()?;
    let pairs = load_training_pairs(train, store)?;
    let k = train.identity_set().len();

    let mut net = backbone.clone();
    net.set_trainable(&cfg.trainable_stages)?;
    let head = init_head(net.config().embed_dim, k, seed);
    let mut model = IdentificationModel::new(net, head, train.identity_set().clone());

    // Deepest frozen prefix: stages before the first trainable group never
    // change, so their activations can be cached per refresh period.
    let n_stages = model.backbone.trainable_mask().len() - 1;
    let prefix = model.backbone.trainable_mask()[..n_stages]
        .iter()
        .position(|&t| t)
        .unwrap_or(n_stages);

    let side = model.backbone.config().input.0.min(model.backbone.config().input.1);
    let block_size = default_block_size(side);

    let images: Vec<FaceImage> = pairs.iter().map(|(img, _)| img.clone()).collect();
    let labels: Vec<usize> = pairs.iter().map(|&(_, l)| l).collect();
    let targets: Vec<Array1<f64>> = labels
        .iter()
        .map(|&l| smooth_label(l, k, cfg.alpha).map(|s| s.values().clone()))
        .collect::<Result<_, _>>()?;

    let mut adam = Adam::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut snapshots_taken = 0;
    let mut prefix_cache: Vec<ndarray::Array3<f64>> = Vec::new();

    for epoch in 0..cfg.epochs {
        if epoch % cfg.mask_refresh_epochs == 0 {
            // Frozen snapshot for mask generation, then rebuild the cached
            // frozen-prefix activations of the masked images.
            let snapshot = model.clone();
            snapshots_taken += 1;
            let masked: Vec<FaceImage> = images
                .par_chunks(PAR_CHUNK)
                .enumerate()
                .map(|(chunk_idx, chunk)| {
                    chunk
                        .iter()
                        .enumerate()
                        .map(|(j, img)| {
                            let i = chunk_idx * PAR_CHUNK + j;
                            if cfg.n_blocks == 0 {
                                return Ok(img.clone());
                            }
                            let mask = attention_mask_from_gradients(
                                &snapshot,
                                img,
                                labels[i],
                                cfg.n_blocks,
                                block_size,
                            )?;
                            Ok(apply_mask(img, &mask))
                        })
                        .collect::<Result<Vec<_>, ModelError>>()
                })
                .collect::<Result<Vec<_>, ModelError>>()?
                .into_iter()
                .flatten()
                .collect();
            prefix_cache = masked
                .par_chunks(PAR_CHUNK)
                .map(|chunk| {
                    chunk
                        .iter()
                        .map(|img| model.backbone.forward_prefix(img, prefix))
                        .collect::<Result<Vec<_>, _>>()
                })
                .collect::<Result<Vec<_>, _>>()?
                .into_iter()
                .flatten()
                .collect();
        }

        let lr = lr_at_epoch(cfg.initial_lr, cfg.lr_decay, epoch);
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            let backbone_ref = &model.backbone;
            let head_ref = &model.head;
            let partials: Vec<(BackboneGrads, Array2<f64>, Array1<f64>)> = batch
                .par_chunks(PAR_CHUNK)
                .map(|chunk| {
                    let mut bg = backbone_ref.zero_grads();
                    let mut hw = Array2::zeros(head_ref.w.dim());
                    let mut hb = Array1::zeros(head_ref.b.dim());
                    for &i in chunk {
                        let cache =
                            backbone_ref.forward_cache_from(prefix_cache[i].clone(), prefix);
                        let logits = head_ref.forward(cache.embedding());
                        let (_, mut dlogits) = cross_entropy(&logits, &targets[i]);
                        dlogits *= scale;
                        let (d_emb, head_grads) =
                            head_ref.backward(cache.embedding(), &dlogits, true);
                        let (gw, gb) = head_grads.expect("params requested");
                        hw += &gw;
                        hb += &gb;
                        backbone_ref.backward(&cache, &d_emb, Some(&mut bg), false);
                    }
                    (bg, hw, hb)
                })
                .collect();

            let mut grads: Vec<ArrayD<f64>> = Vec::new();
            let mut head_w = Array2::zeros(model.head.w.dim());
            let mut head_b = Array1::zeros(model.head.b.dim());
            let mut merged = model.backbone.zero_grads();
            for (bg, hw, hb) in partials {
                merge_grads(&mut merged, bg);
                head_w += &hw;
                head_b += &hb;
            }
            grads.extend(model.backbone.trainable_grads(&merged));
            grads.push(head_w.into_dyn());
            grads.push(head_b.into_dyn());

            let mut params = model.backbone.trainable_tensors_mut();
            params.push(model.head.w.view_mut().into_dyn());
            params.push(model.head.b.view_mut().into_dyn());
            adam.step(params, &grads, lr);
        }
    }

    Ok(FinetuneRun { model, snapshots_taken })
}

fn merge_grads(into: &mut BackboneGrads, from: BackboneGrads) {
    for (dst, src) in into.stages.iter_mut().zip(from.stages) {
        match (dst.as_mut(), src) {
            (Some((dw, db)), Some((sw, sb))) => {
                *dw += &sw;
                *db += &sb;
            }
            (None, Some(s)) => *dst = Some(s),
            _ => {}
        }
    }
    match (into.proj.as_mut(), from.proj) {
        (Some((dw, db)), Some((sw, sb))) => {
            *dw += &sw;
            *db += &sb;
        }
        (None, Some(s)) => into.proj = Some(s),
        _ => {}
    }
}

/// Hyperparameters for margin-softmax backbone pretraining.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub initial_lr: f64,
    pub lr_decay: f64,
    /// Additive cosine margin subtracted from the target logit.
    pub margin: f64,
    /// Logit scale applied to the (margin-adjusted) cosines.
    pub scale: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            batch_size: 32,
            initial_lr: 0.001,
            lr_decay: 0.1,
            margin: 0.25,
            scale: 12.0,
        }
    }
}

/// Trains a fresh backbone end-to-end on real faces with a cosine-margin
/// softmax objective, yielding an identity extractor whose embeddings
/// cluster by identity. The classification weights are discarded.
pub fn pretrain_backbone(
    train: &DatasetManifest,
    store: &dyn ImageStore,
    arch: crate::model::BackboneConfig,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<ConvBackbone, ModelError> {
    assert!(arch.normalize, "margin pretraining requires normalized embeddings");
    let pairs = load_training_pairs(train, store)?;
    let k = train.identity_set().len();
    let d = arch.embed_dim;

    let mut backbone = ConvBackbone::new(arch, seed);
    let images: Vec<FaceImage> = pairs.iter().map(|(img, _)| img.clone()).collect();
    let labels: Vec<usize> = pairs.iter().map(|&(_, l)| l).collect();

    // Class-center matrix of the margin head, rows normalized on the fly.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let mut centers = Array2::zeros((k, d));
    for v in centers.iter_mut() {
        let n: f64 = StandardNormal.sample(&mut rng);
        *v = n / (d as f64).sqrt();
    }

    let mut adam = Adam::new();
    let mut order: Vec<usize> = (0..pairs.len()).collect();

    for epoch in 0..cfg.epochs {
        let lr = lr_at_epoch(cfg.initial_lr, cfg.lr_decay, epoch);
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            let normalized_rows: Vec<(Array1<f64>, f64)> =
                centers.axis_iter(Axis(0)).map(|row| l2_normalize(&row.to_owned())).collect();
            let backbone_ref = &backbone;
            let rows_ref = &normalized_rows;
            let partials: Vec<(BackboneGrads, Array2<f64>)> = batch
                .par_chunks(PAR_CHUNK)
                .map(|chunk| {
                    let mut bg = backbone_ref.zero_grads();
                    let mut dc = Array2::zeros((k, d));
                    for &i in chunk {
                        let cache = backbone_ref
                            .forward_cache(&images[i])
                            .expect("training images match the architecture");
                        let z = cache.embedding();
                        let mut logits = Array1::zeros(k);
                        for (c, (row, _)) in rows_ref.iter().enumerate() {
                            logits[c] = cfg.scale * row.dot(z);
                        }
                        logits[labels[i]] -= cfg.scale * cfg.margin;
                        let target = smooth_label(labels[i], k, 0.0).expect("label in range");
                        let (_, mut dlogits) = cross_entropy(&logits, target.values());
                        dlogits *= scale * cfg.scale;
                        // d/dz and d/dcenter of the cosine terms
                        let mut d_emb = Array1::zeros(d);
                        for (c, (row, norm)) in rows_ref.iter().enumerate() {
                            if dlogits[c] == 0.0 {
                                continue;
                            }
                            d_emb.scaled_add(dlogits[c], row);
                            let d_row_hat = z * dlogits[c];
                            let d_raw = crate::model::nn::l2_normalize_backward(row, *norm, &d_row_hat);
                            dc.row_mut(c).scaled_add(1.0, &d_raw);
                        }
                        backbone_ref.backward(&cache, &d_emb, Some(&mut bg), false);
                    }
                    (bg, dc)
                })
                .collect();

            let mut merged = backbone.zero_grads();
            let mut d_centers = Array2::zeros((k, d));
            for (bg, dc) in partials {
                merge_grads(&mut merged, bg);
                d_centers += &dc;
            }
            let mut grads = backbone.trainable_grads(&merged);
            grads.push(d_centers.into_dyn());
            let mut params = backbone.trainable_tensors_mut();
            params.push(centers.view_mut().into_dyn());
            adam.step(params, &grads, lr);
        }
    }

    Ok(backbone)
}
