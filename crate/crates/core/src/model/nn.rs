//! Minimal f64 neural-net layers with exact manual backpropagation.
//!
//! Everything here is smooth (SiLU activations, average pooling), so input
//! gradients match central finite differences to high precision — a property
//! the attacks and the gradient-attention machinery rely on.

use ndarray::{s, Array1, Array2, Array3};

/// 3×3 same-padding convolution. Weights are stored as a
/// `[9*cin, cout]` matrix whose rows are ordered `(ky, kx, cin)` to line up
/// with [`im2col`].
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Conv3x3 {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub cin: usize,
    pub cout: usize,
}

/// Patch matrix for a 3×3 kernel with zero padding: row `r*w + c` holds the
/// flattened receptive field of output pixel `(r, c)`.
pub(crate) fn im2col(x: &Array3<f64>) -> Array2<f64> {
    let (h, w, cin) = x.dim();
    let mut col = Array2::zeros((h * w, 9 * cin));
    for ky in 0..3usize {
        for kx in 0..3usize {
            let block = (ky * 3 + kx) * cin;
            // output rows r where source row r+ky-1 is in bounds
            let r0 = 1usize.saturating_sub(ky);
            let r1 = (h + 1 - ky).min(h);
            let c0 = 1usize.saturating_sub(kx);
            let c1 = (w + 1 - kx).min(w);
            if r0 >= r1 || c0 >= c1 {
                continue;
            }
            for r in r0..r1 {
                let sr = r + ky - 1;
                let src = x.slice(s![sr, (c0 + kx - 1)..(c1 + kx - 1), ..]);
                let mut dst = col.slice_mut(s![(r * w + c0)..(r * w + c1), block..block + cin]);
                dst.assign(&src);
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatter-adds patch-matrix gradients back to pixels.
pub(crate) fn col2im(dcol: &Array2<f64>, h: usize, w: usize, cin: usize) -> Array3<f64> {
    let mut dx = Array3::zeros((h, w, cin));
    for ky in 0..3usize {
        for kx in 0..3usize {
            let block = (ky * 3 + kx) * cin;
            let r0 = 1usize.saturating_sub(ky);
            let r1 = (h + 1 - ky).min(h);
            let c0 = 1usize.saturating_sub(kx);
            let c1 = (w + 1 - kx).min(w);
            if r0 >= r1 || c0 >= c1 {
                continue;
            }
            for r in r0..r1 {
                let sr = r + ky - 1;
                let src = dcol.slice(s![(r * w + c0)..(r * w + c1), block..block + cin]);
                let mut dst = dx.slice_mut(s![sr, (c0 + kx - 1)..(c1 + kx - 1), ..]);
                dst += &src;
            }
        }
    }
    dx
}

impl Conv3x3 {
    pub fn new(cin: usize, cout: usize) -> Self {
        Self { w: Array2::zeros((9 * cin, cout)), b: Array1::zeros(cout), cin, cout }
    }

    /// Returns the output and the patch matrix needed by the backward pass.
    pub fn forward(&self, x: &Array3<f64>) -> (Array3<f64>, Array2<f64>) {
        let (h, w, _) = x.dim();
        let col = im2col(x);
        let mut y_flat = col.dot(&self.w);
        y_flat += &self.b;
        let y = y_flat.into_shape_with_order((h, w, self.cout)).expect("conv output shape");
        (y, col)
    }

    /// Computes `(dx, dw, db)`; the weight/bias gradients are skipped when
    /// `want_params` is false.
    pub fn backward(
        &self,
        col: &Array2<f64>,
        dy: &Array3<f64>,
        want_params: bool,
    ) -> (Array3<f64>, Option<(Array2<f64>, Array1<f64>)>) {
        let (h, w, cout) = dy.dim();
        let dy_flat = dy
            .view()
            .into_shape_with_order((h * w, cout))
            .expect("contiguous gradient")
            .to_owned();
        let params = want_params.then(|| {
            let dw = col.t().dot(&dy_flat);
            let db = dy_flat.sum_axis(ndarray::Axis(0));
            (dw, db)
        });
        let dcol = dy_flat.dot(&self.w.t());
        let dx = col2im(&dcol, h, w, self.cin);
        (dx, params)
    }
}

/// Dense affine map `y = W x + b` with `W: [out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Linear {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    pub fn new(input: usize, output: usize) -> Self {
        Self { w: Array2::zeros((output, input)), b: Array1::zeros(output) }
    }

    pub fn forward(&self, x: &Array1<f64>) -> Array1<f64> {
        self.w.dot(x) + &self.b
    }

    pub fn backward(
        &self,
        x: &Array1<f64>,
        dy: &Array1<f64>,
        want_params: bool,
    ) -> (Array1<f64>, Option<(Array2<f64>, Array1<f64>)>) {
        let params = want_params.then(|| {
            let dw = dy
                .view()
                .into_shape_with_order((dy.len(), 1))
                .expect("column vector")
                .dot(&x.view().into_shape_with_order((1, x.len())).expect("row vector"));
            (dw, dy.clone())
        });
        (self.w.t().dot(dy), params)
    }
}

pub(crate) fn silu(x: &Array3<f64>) -> Array3<f64> {
    x.mapv(|v| v / (1.0 + (-v).exp()))
}

/// Gradient of SiLU given its input and the upstream gradient.
pub(crate) fn silu_backward(pre_act: &Array3<f64>, dy: &Array3<f64>) -> Array3<f64> {
    let mut dx = dy.clone();
    dx.zip_mut_with(pre_act, |g, &v| {
        let sig = 1.0 / (1.0 + (-v).exp());
        *g *= sig + v * sig * (1.0 - sig);
    });
    dx
}

/// 2×2 average pooling; spatial dimensions must be even.
pub(crate) fn avgpool2(x: &Array3<f64>) -> Array3<f64> {
    let (h, w, c) = x.dim();
    debug_assert!(h % 2 == 0 && w % 2 == 0, "pooling needs even spatial dims");
    let mut y = Array3::zeros((h / 2, w / 2, c));
    for r in 0..h / 2 {
        for col in 0..w / 2 {
            for ch in 0..c {
                y[[r, col, ch]] = 0.25
                    * (x[[2 * r, 2 * col, ch]]
                        + x[[2 * r + 1, 2 * col, ch]]
                        + x[[2 * r, 2 * col + 1, ch]]
                        + x[[2 * r + 1, 2 * col + 1, ch]]);
            }
        }
    }
    y
}

pub(crate) fn avgpool2_backward(dy: &Array3<f64>, h: usize, w: usize) -> Array3<f64> {
    let (hp, wp, c) = dy.dim();
    debug_assert_eq!((hp * 2, wp * 2), (h, w));
    let mut dx = Array3::zeros((h, w, c));
    for r in 0..hp {
        for col in 0..wp {
            for ch in 0..c {
                let g = 0.25 * dy[[r, col, ch]];
                dx[[2 * r, 2 * col, ch]] = g;
                dx[[2 * r + 1, 2 * col, ch]] = g;
                dx[[2 * r, 2 * col + 1, ch]] = g;
                dx[[2 * r + 1, 2 * col + 1, ch]] = g;
            }
        }
    }
    dx
}

/// Unit L2 normalization; returns the scaled vector and the original norm.
pub(crate) fn l2_normalize(x: &Array1<f64>) -> (Array1<f64>, f64) {
    let norm = x.dot(x).sqrt();
    if norm == 0.0 {
        return (x.clone(), 0.0);
    }
    (x / norm, norm)
}

/// Gradient through `y = x / ||x||` given the normalized output.
pub(crate) fn l2_normalize_backward(y: &Array1<f64>, norm: f64, dy: &Array1<f64>) -> Array1<f64> {
    if norm == 0.0 {
        return dy.clone();
    }
    let proj = y.dot(dy);
    (dy - &(y * proj)) / norm
}

/// Numerically stable softmax.
pub(crate) fn softmax(logits: &Array1<f64>) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut e = logits.mapv(|v| (v - max).exp());
    let sum = e.sum();
    e /= sum;
    e
}

/// Cross-entropy against an arbitrary label distribution; returns the loss
/// and the gradient w.r.t. the logits (`p - y`).
pub(crate) fn cross_entropy(logits: &Array1<f64>, target: &Array1<f64>) -> (f64, Array1<f64>) {
    let p = softmax(logits);
    let loss = -target
        .iter()
        .zip(p.iter())
        .map(|(&t, &pi)| if t == 0.0 { 0.0 } else { t * pi.max(1e-300).ln() })
        .sum::<f64>();
    (loss, &p - target)
}
