//! Layer primitives with hand-written forward/backward passes.
//!
//! Convolutions go through im2col + one GEMM per layer per batch, which is
//! where essentially all training time is spent. Activations use the standard
//! `(batch, channels, height, width)` layout; the GEMM side uses a
//! channel-major `(channels, batch * height * width)` matrix, converted by
//! contiguous per-plane copies.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array4, ArrayD, ArrayView1, ArrayView2, ArrayView4, Dimension};

/// Geometry of one convolution layer (square kernel, symmetric padding).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_c: usize,
    pub out_c: usize,
    pub ksize: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvSpec {
    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.ksize) / self.stride + 1,
            (w + 2 * self.pad - self.ksize) / self.stride + 1,
        )
    }

    fn patch_len(&self) -> usize {
        self.in_c * self.ksize * self.ksize
    }
}

/// Unfolds image patches into a `(in_c * k * k, batch * out_h * out_w)`
/// matrix. Out-of-image taps stay zero.
pub fn im2col(x: &ArrayView4<f32>, sp: &ConvSpec) -> Array2<f32> {
    let (b, c, h, w) = x.dim();
    debug_assert_eq!(c, sp.in_c);
    let (oh, ow) = sp.out_hw(h, w);
    let n = b * oh * ow;
    let k = sp.ksize;
    let mut col = Array2::<f32>::zeros((sp.patch_len(), n));
    let xs = x.as_slice().expect("im2col input must be standard layout");
    let cols = col.as_slice_mut().unwrap();
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row_off = ((ci * k + ky) * k + kx) * n;
                for bi in 0..b {
                    let img = &xs[(bi * c + ci) * h * w..][..h * w];
                    for oy in 0..oh {
                        let iy = (oy * sp.stride + ky) as isize - sp.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &img[iy as usize * w..][..w];
                        let dst = &mut cols[row_off + (bi * oh + oy) * ow..][..ow];
                        if sp.stride == 1 {
                            let lo = sp.pad.saturating_sub(kx);
                            let hi = (w + sp.pad - kx).min(ow);
                            if lo < hi {
                                dst[lo..hi]
                                    .copy_from_slice(&src[lo + kx - sp.pad..hi + kx - sp.pad]);
                            }
                        } else {
                            for (ox, d) in dst.iter_mut().enumerate() {
                                let ix = (ox * sp.stride + kx) as isize - sp.pad as isize;
                                if ix >= 0 && (ix as usize) < w {
                                    *d = src[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

/// Folds a patch-gradient matrix back onto the input, accumulating
/// overlapping taps. Inverse traversal of [`im2col`].
pub fn col2im(dcol: &ArrayView2<f32>, sp: &ConvSpec, b: usize, h: usize, w: usize) -> Array4<f32> {
    let (oh, ow) = sp.out_hw(h, w);
    let n = b * oh * ow;
    let c = sp.in_c;
    let k = sp.ksize;
    debug_assert_eq!(dcol.dim(), (sp.patch_len(), n));
    let mut dx = Array4::<f32>::zeros((b, c, h, w));
    let dxs = dx.as_slice_mut().unwrap();
    let dcols = dcol.as_slice().expect("col2im input must be standard layout");
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row_off = ((ci * k + ky) * k + kx) * n;
                for bi in 0..b {
                    let img = &mut dxs[(bi * c + ci) * h * w..][..h * w];
                    for oy in 0..oh {
                        let iy = (oy * sp.stride + ky) as isize - sp.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut img[iy as usize * w..][..w];
                        let src = &dcols[row_off + (bi * oh + oy) * ow..][..ow];
                        if sp.stride == 1 {
                            let lo = sp.pad.saturating_sub(kx);
                            let hi = (w + sp.pad - kx).min(ow);
                            for ox in lo..hi {
                                dst[ox + kx - sp.pad] += src[ox];
                            }
                        } else {
                            for (ox, &s) in src.iter().enumerate() {
                                let ix = (ox * sp.stride + kx) as isize - sp.pad as isize;
                                if ix >= 0 && (ix as usize) < w {
                                    dst[ix as usize] += s;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// `(batch, c, h, w)` -> `(c, batch * h * w)` by contiguous plane copies.
pub fn to_channel_major(x: &ArrayView4<f32>) -> Array2<f32> {
    let (b, c, h, w) = x.dim();
    let plane = h * w;
    let mut out = Array2::<f32>::zeros((c, b * plane));
    let xs = x.as_slice().expect("standard layout");
    let os = out.as_slice_mut().unwrap();
    for ci in 0..c {
        for bi in 0..b {
            os[ci * b * plane + bi * plane..][..plane]
                .copy_from_slice(&xs[(bi * c + ci) * plane..][..plane]);
        }
    }
    out
}

/// `(c, batch * h * w)` -> `(batch, c, h, w)`, optionally adding a per-channel
/// bias during the copy.
pub fn from_channel_major(
    m: &ArrayView2<f32>,
    b: usize,
    h: usize,
    w: usize,
    bias: Option<&ArrayView1<f32>>,
) -> Array4<f32> {
    let (c, n) = m.dim();
    let plane = h * w;
    debug_assert_eq!(n, b * plane);
    let mut out = Array4::<f32>::zeros((b, c, h, w));
    let ms = m.as_slice().expect("standard layout");
    let os = out.as_slice_mut().unwrap();
    for ci in 0..c {
        let add = bias.map_or(0.0, |v| v[ci]);
        for bi in 0..b {
            let src = &ms[ci * n + bi * plane..][..plane];
            let dst = &mut os[(bi * c + ci) * plane..][..plane];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s + add;
            }
        }
    }
    out
}

/// Convolution forward pass. Returns the output activations and the im2col
/// matrix (needed again for the weight gradient).
pub fn conv_forward(
    x: &ArrayView4<f32>,
    weight: &ArrayView2<f32>, // (out_c, in_c * k * k)
    bias: &ArrayView1<f32>,
    sp: &ConvSpec,
) -> (Array4<f32>, Array2<f32>) {
    let (b, _, h, w) = x.dim();
    let (oh, ow) = sp.out_hw(h, w);
    let col = im2col(x, sp);
    let mut out = Array2::<f32>::zeros((sp.out_c, col.ncols()));
    general_mat_mul(1.0, weight, &col, 0.0, &mut out);
    let y = from_channel_major(&out.view(), b, oh, ow, Some(bias));
    (y, col)
}

/// Gradient with respect to the convolution input.
pub fn conv_backward_input(
    dy_cm: &ArrayView2<f32>, // channel-major (out_c, batch * oh * ow)
    weight: &ArrayView2<f32>,
    sp: &ConvSpec,
    b: usize,
    h: usize,
    w: usize,
) -> Array4<f32> {
    let mut dcol = Array2::<f32>::zeros((sp.patch_len(), dy_cm.ncols()));
    general_mat_mul(1.0, &weight.t(), dy_cm, 0.0, &mut dcol);
    col2im(&dcol.view(), sp, b, h, w)
}

/// Gradients with respect to the convolution weight and bias.
pub fn conv_backward_params(
    dy_cm: &ArrayView2<f32>,
    col: &ArrayView2<f32>,
    sp: &ConvSpec,
) -> (Array2<f32>, Array1<f32>) {
    let mut dw = Array2::<f32>::zeros((sp.out_c, sp.patch_len()));
    general_mat_mul(1.0, dy_cm, &col.t(), 0.0, &mut dw);
    let db = dy_cm.sum_axis(ndarray::Axis(1));
    (dw, db)
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

/// `y = x w^T + b` with `x: (batch, d)`, `w: (k, d)`.
pub fn linear_forward(
    x: &ArrayView2<f32>,
    weight: &ArrayView2<f32>,
    bias: &ArrayView1<f32>,
) -> Array2<f32> {
    let mut y = Array2::<f32>::zeros((x.nrows(), weight.nrows()));
    general_mat_mul(1.0, x, &weight.t(), 0.0, &mut y);
    for mut row in y.rows_mut() {
        row += bias;
    }
    y
}

/// Gradient of a linear layer with respect to its input.
pub fn linear_backward_input(dy: &ArrayView2<f32>, weight: &ArrayView2<f32>) -> Array2<f32> {
    let mut dx = Array2::<f32>::zeros((dy.nrows(), weight.ncols()));
    general_mat_mul(1.0, dy, weight, 0.0, &mut dx);
    dx
}

/// Gradients of a linear layer with respect to weight and bias.
pub fn linear_backward_params(
    dy: &ArrayView2<f32>,
    x: &ArrayView2<f32>,
) -> (Array2<f32>, Array1<f32>) {
    let mut dw = Array2::<f32>::zeros((dy.ncols(), x.ncols()));
    general_mat_mul(1.0, &dy.t(), x, 0.0, &mut dw);
    let db = dy.sum_axis(ndarray::Axis(0));
    (dw, db)
}

// ---------------------------------------------------------------------------
// ReLU
// ---------------------------------------------------------------------------

/// Elementwise `max(0, x)` in place.
pub fn relu_inplace<D: Dimension>(a: &mut ndarray::Array<f32, D>) {
    a.mapv_inplace(|v| if v > 0.0 { v } else { 0.0 });
}

/// Masks an upstream gradient by the ReLU activation pattern: positions where
/// the forward output was zero get zero gradient.
pub fn relu_mask_inplace<D: Dimension>(
    dy: &mut ndarray::Array<f32, D>,
    out: &ndarray::Array<f32, D>,
) {
    debug_assert_eq!(dy.raw_dim(), out.raw_dim());
    ndarray::Zip::from(dy).and(out).for_each(|d, &o| {
        if o <= 0.0 {
            *d = 0.0;
        }
    });
}

// ---------------------------------------------------------------------------
// Batch normalization (2d, per channel)
// ---------------------------------------------------------------------------

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

/// Values cached by the BN forward pass for the backward pass.
pub struct BnCache {
    pub xhat: Array4<f32>,
    pub inv_std: Array1<f32>,
    /// True when batch statistics were used (gradient flows through them).
    pub batch_stats: bool,
}

/// Batch statistics produced by a train-mode BN forward, for the caller to
/// fold into the running buffers (only the parameter-update pass does).
pub struct BnBatchStats {
    pub mean: Array1<f32>,
    /// Unbiased variance estimate, matching what running buffers track.
    pub var_unbiased: Array1<f32>,
}

/// Batch-norm forward. With `batch_stats` the layer normalizes by live batch
/// statistics and returns them; otherwise the running buffers are used.
pub fn batchnorm_forward(
    x: &ArrayView4<f32>,
    gamma: &ArrayView1<f32>,
    beta: &ArrayView1<f32>,
    running_mean: &ArrayView1<f32>,
    running_var: &ArrayView1<f32>,
    batch_stats: bool,
) -> (Array4<f32>, BnCache, Option<BnBatchStats>) {
    let (b, c, h, w) = x.dim();
    let n = (b * h * w) as f32;
    let mut mean = Array1::<f32>::zeros(c);
    let mut var = Array1::<f32>::zeros(c);
    let mut stats = None;
    if batch_stats {
        for ci in 0..c {
            let ch = x.slice(ndarray::s![.., ci, .., ..]);
            let m = ch.sum() / n;
            let v = ch.iter().map(|&t| (t - m) * (t - m)).sum::<f32>() / n;
            mean[ci] = m;
            var[ci] = v;
        }
        let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
        stats = Some(BnBatchStats { mean: mean.clone(), var_unbiased: var.mapv(|v| v * unbias) });
    } else {
        mean.assign(running_mean);
        var.assign(running_var);
    }
    let inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
    let mut xhat = x.to_owned();
    let mut y = Array4::<f32>::zeros((b, c, h, w));
    for ci in 0..c {
        let (m, is, g, bt) = (mean[ci], inv_std[ci], gamma[ci], beta[ci]);
        let mut xh = xhat.slice_mut(ndarray::s![.., ci, .., ..]);
        xh.mapv_inplace(|v| (v - m) * is);
        let mut yc = y.slice_mut(ndarray::s![.., ci, .., ..]);
        yc.assign(&xh);
        yc.mapv_inplace(|v| v * g + bt);
    }
    (y, BnCache { xhat, inv_std, batch_stats }, stats)
}

/// Folds batch statistics into running buffers with the usual momentum rule.
pub fn commit_bn_stats(
    running_mean: &mut ArrayD<f32>,
    running_var: &mut ArrayD<f32>,
    stats: &BnBatchStats,
) {
    for (r, &m) in running_mean.iter_mut().zip(stats.mean.iter()) {
        *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
    }
    for (r, &v) in running_var.iter_mut().zip(stats.var_unbiased.iter()) {
        *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
    }
}

/// Batch-norm backward: gradient w.r.t. input, gamma, beta.
pub fn batchnorm_backward(
    dy: &ArrayView4<f32>,
    cache: &BnCache,
    gamma: &ArrayView1<f32>,
) -> (Array4<f32>, Array1<f32>, Array1<f32>) {
    let (b, c, h, w) = dy.dim();
    let n = (b * h * w) as f32;
    let mut dx = Array4::<f32>::zeros((b, c, h, w));
    let mut dgamma = Array1::<f32>::zeros(c);
    let mut dbeta = Array1::<f32>::zeros(c);
    for ci in 0..c {
        let dyc = dy.slice(ndarray::s![.., ci, .., ..]);
        let xh = cache.xhat.slice(ndarray::s![.., ci, .., ..]);
        dgamma[ci] = ndarray::Zip::from(&dyc).and(&xh).fold(0.0, |a, &d, &x| a + d * x);
        dbeta[ci] = dyc.sum();
        let g = gamma[ci];
        let is = cache.inv_std[ci];
        let mut dxc = dx.slice_mut(ndarray::s![.., ci, .., ..]);
        if cache.batch_stats {
            // Gradient flows through the batch mean and variance.
            let sum_dxhat = dyc.sum() * g;
            let sum_dxhat_xhat = dgamma[ci] * g;
            ndarray::Zip::from(&mut dxc).and(&dyc).and(&xh).for_each(|o, &d, &x| {
                let dxhat = d * g;
                *o = (is / n) * (n * dxhat - sum_dxhat - x * sum_dxhat_xhat);
            });
        } else {
            // Running statistics are constants.
            ndarray::Zip::from(&mut dxc).and(&dyc).for_each(|o, &d| {
                *o = d * g * is;
            });
        }
    }
    (dx, dgamma, dbeta)
}

// ---------------------------------------------------------------------------
// Pooling
// ---------------------------------------------------------------------------

/// Mean over the spatial dimensions: `(b, c, h, w) -> (b, c)`.
pub fn global_avg_pool(x: &ArrayView4<f32>) -> Array2<f32> {
    let (b, c, h, w) = x.dim();
    let n = (h * w) as f32;
    let mut y = Array2::<f32>::zeros((b, c));
    for bi in 0..b {
        for ci in 0..c {
            y[[bi, ci]] = x.slice(ndarray::s![bi, ci, .., ..]).sum() / n;
        }
    }
    y
}

/// Backward of [`global_avg_pool`].
pub fn global_avg_pool_backward(
    dy: &ArrayView2<f32>,
    h: usize,
    w: usize,
) -> Array4<f32> {
    let (b, c) = dy.dim();
    let scale = 1.0 / (h * w) as f32;
    let mut dx = Array4::<f32>::zeros((b, c, h, w));
    for bi in 0..b {
        for ci in 0..c {
            dx.slice_mut(ndarray::s![bi, ci, .., ..]).fill(dy[[bi, ci]] * scale);
        }
    }
    dx
}
