//! Procedural identity renderer and face-swap simulator.
//!
//! Each identity is a fixed spatial arrangement of 2-D Gaussian blobs plus a
//! striped texture, all parameterized by a low-dimensional `pattern_params`
//! vector through smooth squashing functions. Smoothness in the parameters
//! makes latent blending meaningful: interpolating two identities' parameters
//! renders an image that combines both appearances.

use ndarray::Array3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::face::FaceImage;

/// Length of every `pattern_params` vector.
pub const PATTERN_DIM: usize = 18;

/// Gaussian pixel noise level applied when a noise seed is present.
pub const NOISE_SIGMA: f64 = 0.02;

const BLOB_COUNT: usize = 5;
/// Face-like blob anchor positions in normalized (row, col) coordinates.
const BLOB_BASE: [(f64, f64); BLOB_COUNT] =
    [(0.36, 0.30), (0.36, 0.70), (0.52, 0.50), (0.75, 0.50), (0.15, 0.50)];
/// Per-blob RGB weights; signs give both brightening and darkening features.
const BLOB_COLOR: [(f64, f64, f64); BLOB_COUNT] = [
    (1.0, 0.35, 0.2),
    (0.25, 1.0, 0.4),
    (0.3, 0.45, 1.0),
    (-0.9, -0.7, -0.5),
    (0.8, 0.7, -0.6),
];
const BLOB_AMP: f64 = 0.22;
const BLOB_OFFSET_SCALE: f64 = 0.10;
const STRIPE_FREQ: f64 = 5.0;
const STRIPE_ANGLE: f64 = 0.6;
const STRIPE_COLOR: (f64, f64, f64) = (1.0, 0.9, 0.8);
/// Fill used outside the frame when a pose shift uncovers border pixels.
const BORDER_FILL: f64 = 0.5;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("pattern_params must have length {PATTERN_DIM}, got {0}")]
    BadPatternLength(usize),
    #[error("illumination_scale {0} outside [0.5, 1.5]")]
    IlluminationOutOfRange(f64),
    #[error("pose_shift {0:?} moves the render outside image bounds")]
    ShiftOutOfBounds((i64, i64)),
    #[error("lambda {0} outside [0, 1]")]
    LambdaOutOfRange(f64),
    #[error("swap source and target must be distinct identities")]
    SourceEqualsTarget,
    #[error("could not place {requested} prototypes at separation margin {margin} after {attempts} draws")]
    SeparationUnsatisfiable { requested: usize, margin: f64, attempts: usize },
}

/// Rendering geometry and swap-compositing constants.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RenderConfig {
    pub height: usize,
    pub width: usize,
    /// Feathered blending band width in pixels for the masked pixel swap.
    pub feather_width: f64,
    /// Elliptical face-region semi-axes as fractions of height and width.
    pub ellipse_axes: (f64, f64),
    /// Minimum pairwise Euclidean distance between prototype parameters.
    pub separation_margin: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            height: crate::face::DEFAULT_SIDE,
            width: crate::face::DEFAULT_SIDE,
            feather_width: 3.0,
            ellipse_axes: (0.34, 0.27),
            separation_margin: 2.0,
        }
    }
}

/// A synthetic person: a label plus the parameter vector seeding its render.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityPrototype {
    pub identity: String,
    pub pattern_params: Vec<f64>,
}

impl IdentityPrototype {
    pub fn new(identity: impl Into<String>, pattern_params: Vec<f64>) -> Result<Self, SynthError> {
        if pattern_params.len() != PATTERN_DIM {
            return Err(SynthError::BadPatternLength(pattern_params.len()));
        }
        Ok(Self { identity: identity.into(), pattern_params })
    }
}

/// Intra-identity variation: integer translation, multiplicative lighting and
/// optional seeded pixel noise (`None` disables the noise term).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttributeParams {
    pub pose_shift: (i64, i64),
    pub illumination_scale: f64,
    pub noise_seed: Option<u64>,
}

impl AttributeParams {
    pub fn canonical() -> Self {
        Self { pose_shift: (0, 0), illumination_scale: 1.0, noise_seed: None }
    }

    fn validate(&self, cfg: &RenderConfig) -> Result<(), SynthError> {
        if !(0.5..=1.5).contains(&self.illumination_scale) {
            return Err(SynthError::IlluminationOutOfRange(self.illumination_scale));
        }
        let (dy, dx) = self.pose_shift;
        if dy.unsigned_abs() as usize >= cfg.height || dx.unsigned_abs() as usize >= cfg.width {
            return Err(SynthError::ShiftOutOfBounds(self.pose_shift));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SwapMechanism {
    /// Renders the identity whose parameters are the lambda-weighted blend of
    /// source and target, under the target's attributes.
    LatentBlend,
    /// Composites the central elliptical region of the source render onto the
    /// target render with a feathered boundary; lambda plays no role here.
    MaskedPixelBlend,
}

impl SwapMechanism {
    pub fn tag(self) -> &'static str {
        match self {
            SwapMechanism::LatentBlend => "lat",
            SwapMechanism::MaskedPixelBlend => "pix",
        }
    }
}

/// Full description of one simulated face swap.
#[derive(Debug, Clone)]
pub struct SwapSpec {
    pub source: IdentityPrototype,
    pub target: IdentityPrototype,
    pub target_attributes: AttributeParams,
    /// Identity blend weight toward the source, in [0,1].
    pub lambda: f64,
    pub mechanism: SwapMechanism,
}

impl SwapSpec {
    fn validate(&self, cfg: &RenderConfig) -> Result<(), SynthError> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(SynthError::LambdaOutOfRange(self.lambda));
        }
        if self.source.identity == self.target.identity {
            return Err(SynthError::SourceEqualsTarget);
        }
        self.target_attributes.validate(cfg)
    }
}

fn pattern_pixel(params: &[f64], y: f64, x: f64) -> (f64, f64, f64) {
    let base = 0.5 + 0.12 * params[15].tanh();
    let stripe_phase = std::f64::consts::FRAC_PI_2 * params[16].tanh();
    let stripe_amp = 0.055 + 0.025 * params[17].tanh();
    let u = x * STRIPE_ANGLE.cos() + y * STRIPE_ANGLE.sin();
    let stripe = stripe_amp * (2.0 * std::f64::consts::PI * STRIPE_FREQ * u + stripe_phase).sin();
    let mut rgb = (
        base + stripe * STRIPE_COLOR.0,
        base + stripe * STRIPE_COLOR.1,
        base + stripe * STRIPE_COLOR.2,
    );
    for b in 0..BLOB_COUNT {
        let cy = BLOB_BASE[b].0 + BLOB_OFFSET_SCALE * params[3 * b].tanh();
        let cx = BLOB_BASE[b].1 + BLOB_OFFSET_SCALE * params[3 * b + 1].tanh();
        let sigma = 0.09 + 0.03 * params[3 * b + 2].tanh();
        let d2 = (y - cy).powi(2) + (x - cx).powi(2);
        let g = BLOB_AMP * (-d2 / (2.0 * sigma * sigma)).exp();
        rgb.0 += g * BLOB_COLOR[b].0;
        rgb.1 += g * BLOB_COLOR[b].1;
        rgb.2 += g * BLOB_COLOR[b].2;
    }
    rgb
}

fn render_pattern(params: &[f64], cfg: &RenderConfig) -> Array3<f64> {
    let (h, w) = (cfg.height, cfg.width);
    let mut out = Array3::zeros((h, w, 3));
    for r in 0..h {
        let y = (r as f64 + 0.5) / h as f64;
        for c in 0..w {
            let x = (c as f64 + 0.5) / w as f64;
            let rgb = pattern_pixel(params, y, x);
            out[[r, c, 0]] = rgb.0;
            out[[r, c, 1]] = rgb.1;
            out[[r, c, 2]] = rgb.2;
        }
    }
    out
}

fn apply_attributes(mut canvas: Array3<f64>, attrs: &AttributeParams, cfg: &RenderConfig) -> Array3<f64> {
    let (h, w) = (cfg.height as i64, cfg.width as i64);
    let (dy, dx) = attrs.pose_shift;
    if (dy, dx) != (0, 0) {
        let src = canvas;
        let mut shifted = Array3::from_elem(src.dim(), BORDER_FILL);
        for r in 0..h {
            let sr = r - dy;
            if sr < 0 || sr >= h {
                continue;
            }
            for c in 0..w {
                let sc = c - dx;
                if sc < 0 || sc >= w {
                    continue;
                }
                for ch in 0..3 {
                    shifted[[r as usize, c as usize, ch]] = src[[sr as usize, sc as usize, ch]];
                }
            }
        }
        canvas = shifted;
    }
    canvas.mapv_inplace(|v| (v * attrs.illumination_scale).clamp(0.0, 1.0));
    if let Some(seed) = attrs.noise_seed {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        canvas.mapv_inplace(|v| {
            let n: f64 = StandardNormal.sample(&mut rng);
            (v + NOISE_SIGMA * n).clamp(0.0, 1.0)
        });
    }
    canvas
}

fn render_from_params(params: &[f64], attrs: &AttributeParams, cfg: &RenderConfig) -> FaceImage {
    FaceImage::from_clamped(apply_attributes(render_pattern(params, cfg), attrs, cfg))
}

/// Deterministic render of an identity under the given attributes.
pub fn render_real(
    proto: &IdentityPrototype,
    attrs: &AttributeParams,
    cfg: &RenderConfig,
) -> Result<FaceImage, SynthError> {
    if proto.pattern_params.len() != PATTERN_DIM {
        return Err(SynthError::BadPatternLength(proto.pattern_params.len()));
    }
    attrs.validate(cfg)?;
    Ok(render_from_params(&proto.pattern_params, attrs, cfg))
}

/// Simulated face swap under one of two distinct mechanisms.
pub fn render_swap(spec: &SwapSpec, cfg: &RenderConfig) -> Result<FaceImage, SynthError> {
    spec.validate(cfg)?;
    match spec.mechanism {
        SwapMechanism::LatentBlend => {
            let blended: Vec<f64> = spec
                .source
                .pattern_params
                .iter()
                .zip(&spec.target.pattern_params)
                .map(|(s, t)| spec.lambda * s + (1.0 - spec.lambda) * t)
                .collect();
            Ok(render_from_params(&blended, &spec.target_attributes, cfg))
        }
        SwapMechanism::MaskedPixelBlend => {
            let src = render_real(&spec.source, &spec.target_attributes, cfg)?;
            let tgt = render_real(&spec.target, &spec.target_attributes, cfg)?;
            Ok(composite_elliptical(&src, &tgt, cfg))
        }
    }
}

/// Weight of the source render at a pixel: 1 inside the face ellipse, 0 well
/// outside, linear over the feather band.
fn ellipse_weight(r: usize, c: usize, cfg: &RenderConfig) -> f64 {
    let cy = (cfg.height as f64 - 1.0) / 2.0;
    let cx = (cfg.width as f64 - 1.0) / 2.0;
    let a = cfg.ellipse_axes.0 * cfg.height as f64;
    let b = cfg.ellipse_axes.1 * cfg.width as f64;
    let rho = (((r as f64 - cy) / a).powi(2) + ((c as f64 - cx) / b).powi(2)).sqrt();
    let band = cfg.feather_width / a.min(b);
    if band <= 0.0 {
        return if rho <= 1.0 { 1.0 } else { 0.0 };
    }
    ((1.0 + band - rho) / band).clamp(0.0, 1.0)
}

fn composite_elliptical(src: &FaceImage, tgt: &FaceImage, cfg: &RenderConfig) -> FaceImage {
    let mut out = tgt.pixels().clone();
    for r in 0..cfg.height {
        for c in 0..cfg.width {
            let w = ellipse_weight(r, c, cfg);
            if w == 0.0 {
                continue;
            }
            for ch in 0..3 {
                let s = src.pixels()[[r, c, ch]];
                let t = out[[r, c, ch]];
                out[[r, c, ch]] = w * s + (1.0 - w) * t;
            }
        }
    }
    FaceImage::from_clamped(out)
}

/// Draws `count` prototypes with i.i.d. standard-normal parameters, rejecting
/// draws closer than the separation margin to any accepted prototype.
pub fn generate_prototypes(
    count: usize,
    seed: u64,
    cfg: &RenderConfig,
) -> Result<Vec<IdentityPrototype>, SynthError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let width = count.max(2).ilog10() as usize + 1;
    let mut protos: Vec<IdentityPrototype> = Vec::with_capacity(count);
    let mut attempts = 0;
    let max_attempts = 1000 * count.max(1);
    while protos.len() < count {
        attempts += 1;
        if attempts > max_attempts {
            return Err(SynthError::SeparationUnsatisfiable {
                requested: count,
                margin: cfg.separation_margin,
                attempts,
            });
        }
        let params: Vec<f64> = (0..PATTERN_DIM).map(|_| StandardNormal.sample(&mut rng)).collect();
        let min_dist = protos
            .iter()
            .map(|p| {
                p.pattern_params
                    .iter()
                    .zip(&params)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(f64::INFINITY, f64::min);
        if min_dist < cfg.separation_margin {
            continue;
        }
        let label = format!("id{:0width$}", protos.len());
        protos.push(IdentityPrototype { identity: label, pattern_params: params });
    }
    Ok(protos)
}

/// Samples benchmark-style attribute variation from an RNG stream.
pub(crate) fn sample_attributes(rng: &mut ChaCha8Rng) -> AttributeParams {
    let dy = rng.random_range(-3..=3);
    let dx = rng.random_range(-3..=3);
    let illumination = rng.random_range(0.8..1.25);
    let noise_seed = rng.random::<u64>();
    AttributeParams { pose_shift: (dy, dx), illumination_scale: illumination, noise_seed: Some(noise_seed) }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> RenderConfig {
        RenderConfig::default()
    }

    fn two_protos() -> (IdentityPrototype, IdentityPrototype) {
        let protos = generate_prototypes(2, 11, &cfg()).unwrap();
        (protos[0].clone(), protos[1].clone())
    }

    #[test]
    fn render_is_deterministic() {
        let (a, _) = two_protos();
        let attrs = AttributeParams { pose_shift: (2, -1), illumination_scale: 1.1, noise_seed: Some(5) };
        let x = render_real(&a, &attrs, &cfg()).unwrap();
        let y = render_real(&a, &attrs, &cfg()).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn canonical_render_matches_raw_pattern() {
        let (a, _) = two_protos();
        let img = render_real(&a, &AttributeParams::canonical(), &cfg()).unwrap();
        let raw = FaceImage::from_clamped(render_pattern(&a.pattern_params, &cfg()));
        assert_eq!(img, raw);
    }

    #[test]
    fn distinct_identities_render_differently() {
        let (a, b) = two_protos();
        let attrs = AttributeParams::canonical();
        let xa = render_real(&a, &attrs, &cfg()).unwrap();
        let xb = render_real(&b, &attrs, &cfg()).unwrap();
        assert!(xa.l2_distance(&xb) > 0.0);
    }

    #[test]
    fn latent_blend_endpoints_match_real_renders() {
        let (a, b) = two_protos();
        let attrs = AttributeParams { pose_shift: (1, 0), illumination_scale: 0.9, noise_seed: Some(3) };
        let mut spec = SwapSpec {
            source: a.clone(),
            target: b.clone(),
            target_attributes: attrs,
            lambda: 1.0,
            mechanism: SwapMechanism::LatentBlend,
        };
        assert_eq!(render_swap(&spec, &cfg()).unwrap(), render_real(&a, &attrs, &cfg()).unwrap());
        spec.lambda = 0.0;
        assert_eq!(render_swap(&spec, &cfg()).unwrap(), render_real(&b, &attrs, &cfg()).unwrap());
    }

    #[test]
    fn latent_blend_midpoint_equals_midpoint_prototype_render() {
        // Independent route: build the midpoint prototype by hand and render it.
        let (a, b) = two_protos();
        let attrs = AttributeParams::canonical();
        let spec = SwapSpec {
            source: a.clone(),
            target: b.clone(),
            target_attributes: attrs,
            lambda: 0.5,
            mechanism: SwapMechanism::LatentBlend,
        };
        let swapped = render_swap(&spec, &cfg()).unwrap();
        let mid_params: Vec<f64> = a
            .pattern_params
            .iter()
            .zip(&b.pattern_params)
            .map(|(s, t)| 0.5 * s + 0.5 * t)
            .collect();
        let mid = IdentityPrototype::new("mid", mid_params).unwrap();
        assert_eq!(swapped, render_real(&mid, &attrs, &cfg()).unwrap());
    }

    #[test]
    fn blend_distance_to_source_is_monotone_in_lambda() {
        let (a, b) = two_protos();
        let attrs = AttributeParams { pose_shift: (-1, 2), illumination_scale: 1.05, noise_seed: Some(9) };
        let source_render = render_real(&a, &attrs, &cfg()).unwrap();
        let mut prev = f64::INFINITY;
        for step in 0..=10 {
            let lambda = step as f64 / 10.0;
            let spec = SwapSpec {
                source: a.clone(),
                target: b.clone(),
                target_attributes: attrs,
                lambda,
                mechanism: SwapMechanism::LatentBlend,
            };
            let d = render_swap(&spec, &cfg()).unwrap().l2_distance(&source_render);
            assert!(d <= prev + 1e-9, "distance rose at lambda={lambda}: {d} > {prev}");
            prev = d;
        }
    }

    #[test]
    fn mechanisms_produce_distinct_outputs() {
        let (a, b) = two_protos();
        let attrs = AttributeParams::canonical();
        let mut spec = SwapSpec {
            source: a,
            target: b,
            target_attributes: attrs,
            lambda: 0.7,
            mechanism: SwapMechanism::LatentBlend,
        };
        let latent = render_swap(&spec, &cfg()).unwrap();
        spec.mechanism = SwapMechanism::MaskedPixelBlend;
        let masked = render_swap(&spec, &cfg()).unwrap();
        assert!(latent.l2_distance(&masked) > 0.0);
    }

    #[test]
    fn swap_rejects_same_identity_and_bad_lambda() {
        let (a, b) = two_protos();
        let attrs = AttributeParams::canonical();
        let same = SwapSpec {
            source: a.clone(),
            target: a.clone(),
            target_attributes: attrs,
            lambda: 0.5,
            mechanism: SwapMechanism::LatentBlend,
        };
        assert!(matches!(render_swap(&same, &cfg()), Err(SynthError::SourceEqualsTarget)));
        let bad = SwapSpec {
            source: a,
            target: b,
            target_attributes: attrs,
            lambda: 1.2,
            mechanism: SwapMechanism::LatentBlend,
        };
        assert!(matches!(render_swap(&bad, &cfg()), Err(SynthError::LambdaOutOfRange(_))));
    }

    #[test]
    fn prototypes_respect_separation_margin() {
        let protos = generate_prototypes(12, 3, &cfg()).unwrap();
        for i in 0..protos.len() {
            for j in (i + 1)..protos.len() {
                let d: f64 = protos[i]
                    .pattern_params
                    .iter()
                    .zip(&protos[j].pattern_params)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                assert!(d >= cfg().separation_margin);
            }
        }
    }

    #[test]
    fn canonical_renders_stay_apart() {
        // Regression floor for the per-version separation of canonical renders.
        let protos = generate_prototypes(8, 21, &cfg()).unwrap();
        let attrs = AttributeParams::canonical();
        let renders: Vec<FaceImage> =
            protos.iter().map(|p| render_real(p, &attrs, &cfg()).unwrap()).collect();
        for i in 0..renders.len() {
            for j in (i + 1)..renders.len() {
                assert!(
                    renders[i].mean_abs_diff(&renders[j]) > 0.005,
                    "prototypes {i} and {j} render nearly identically"
                );
            }
        }
    }
}
