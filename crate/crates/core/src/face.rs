//! Pixel-level face image type shared by every model, attack and renderer.

use ndarray::Array3;
use thiserror::Error;

/// Default image side used by the synthetic benchmark and the toy backbones.
pub const DEFAULT_SIDE: usize = 64;
/// Default channel count (RGB).
pub const DEFAULT_CHANNELS: usize = 3;

#[derive(Debug, Error)]
pub enum FaceImageError {
    #[error("image has zero-sized dimension {0:?}")]
    EmptyDimension((usize, usize, usize)),
    #[error("pixel value {value} at {index:?} outside [0,1]")]
    PixelOutOfRange { value: f64, index: (usize, usize, usize) },
}

/// An H×W×C grid of reals in [0,1]. All module boundaries exchange images in
/// this normalized form regardless of the on-disk encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceImage {
    pixels: Array3<f64>,
}

impl FaceImage {
    /// Validates pixel range and dimensions.
    pub fn new(pixels: Array3<f64>) -> Result<Self, FaceImageError> {
        let dim = pixels.dim();
        if dim.0 == 0 || dim.1 == 0 || dim.2 == 0 {
            return Err(FaceImageError::EmptyDimension(dim));
        }
        for ((r, c, ch), &v) in pixels.indexed_iter() {
            if !(0.0..=1.0).contains(&v) {
                return Err(FaceImageError::PixelOutOfRange { value: v, index: (r, c, ch) });
            }
        }
        Ok(Self { pixels })
    }

    /// Clamps every value into [0,1] first; useful after arithmetic that may
    /// step slightly outside the box.
    pub fn from_clamped(mut pixels: Array3<f64>) -> Self {
        pixels.mapv_inplace(|v| v.clamp(0.0, 1.0));
        Self { pixels }
    }

    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Self { pixels: Array3::zeros((h, w, c)) }
    }

    pub fn constant(h: usize, w: usize, c: usize, v: f64) -> Self {
        Self::from_clamped(Array3::from_elem((h, w, c), v))
    }

    pub fn pixels(&self) -> &Array3<f64> {
        &self.pixels
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn channels(&self) -> usize {
        self.pixels.dim().2
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.pixels.dim()
    }

    /// Largest absolute per-pixel difference to another image of equal shape.
    pub fn linf_distance(&self, other: &FaceImage) -> f64 {
        assert_eq!(self.shape(), other.shape(), "shape mismatch in linf_distance");
        self.pixels
            .iter()
            .zip(other.pixels.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Euclidean distance over all pixels.
    pub fn l2_distance(&self, other: &FaceImage) -> f64 {
        assert_eq!(self.shape(), other.shape(), "shape mismatch in l2_distance");
        self.pixels
            .iter()
            .zip(other.pixels.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    /// Mean absolute per-pixel difference.
    pub fn mean_abs_diff(&self, other: &FaceImage) -> f64 {
        assert_eq!(self.shape(), other.shape(), "shape mismatch in mean_abs_diff");
        let n = self.pixels.len() as f64;
        self.pixels
            .iter()
            .zip(other.pixels.iter())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / n
    }

    /// 8-bit quantization used when writing image files.
    pub fn to_u8(&self) -> Vec<u8> {
        self.pixels.iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect()
    }

    /// Inverse of [`to_u8`](Self::to_u8) given the target shape.
    pub fn from_u8(data: &[u8], h: usize, w: usize, c: usize) -> Result<Self, FaceImageError> {
        assert_eq!(data.len(), h * w * c, "byte length does not match shape");
        let pixels = Array3::from_shape_vec((h, w, c), data.iter().map(|&b| b as f64 / 255.0).collect())
            .expect("shape checked above");
        Self::new(pixels)
    }
}
