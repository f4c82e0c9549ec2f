//! Forward and backward kernels on raw row-major buffers.
//!
//! The tape validates shapes before calling in here; kernels assume
//! consistent dimensions.

use std::borrow::Cow;

use super::{config_err, gemm, shape_err, Layout, Scalar, TensorError};
use crate::exec;

/// Samples per partial weight-gradient accumulator. Fixed so that the
/// reduction order does not depend on the thread count.
const GRAD_GROUP: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], weight: &[usize], stride: usize, pad: usize) -> Result<Self, TensorError> {
        if input.len() != 4 || weight.len() != 4 {
            return Err(shape_err("conv2d", format!("expected 4-d input and weight, got {input:?} and {weight:?}")));
        }
        if input[1] != weight[1] {
            return Err(shape_err(
                "conv2d",
                format!("input has {} channels but weight expects {} (weight {weight:?})", input[1], weight[1]),
            ));
        }
        if stride == 0 {
            return Err(config_err("conv2d", "stride must be at least 1"));
        }
        let (h, w, kh, kw) = (input[2], input[3], weight[2], weight[3]);
        if kh == 0 || kw == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(config_err(
                "conv2d",
                format!("kernel {kh}x{kw} with padding {pad} does not fit input {h}x{w}"),
            ));
        }
        Ok(Self {
            batch: input[0],
            in_c: input[1],
            in_h: h,
            in_w: w,
            out_c: weight[0],
            k_h: kh,
            k_w: kw,
            stride,
            pad,
            out_h: (h + 2 * pad - kh) / stride + 1,
            out_w: (w + 2 * pad - kw) / stride + 1,
        })
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.batch, self.out_c, self.out_h, self.out_w]
    }

    fn patch_len(&self) -> usize {
        self.in_c * self.k_h * self.k_w
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_sample(&self) -> usize {
        self.in_c * self.in_h * self.in_w
    }

    fn is_pointwise(&self) -> bool {
        self.k_h == 1 && self.k_w == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds one sample into `[C*kH*kW, H'*W']` patch columns.
fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let plane = g.out_plane();
    for c in 0..g.in_c {
        let xc = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..g.k_h {
            for kj in 0..g.k_w {
                let row = (c * g.k_h + ki) * g.k_w + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    let out_row = &mut dst[oh * g.out_w..(oh + 1) * g.out_w];
                    if ih < 0 || ih >= g.in_h as isize {
                        out_row.fill(T::ZERO);
                        continue;
                    }
                    let src = &xc[ih as usize * g.in_w..(ih as usize + 1) * g.in_w];
                    for (ow, o) in out_row.iter_mut().enumerate() {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        *o = if iw < 0 || iw >= g.in_w as isize { T::ZERO } else { src[iw as usize] };
                    }
                }
            }
        }
    }
}

/// Folds patch-column gradients back onto one input sample (accumulating).
fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let plane = g.out_plane();
    for c in 0..g.in_c {
        let dxc = &mut dx[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..g.k_h {
            for kj in 0..g.k_w {
                let row = (c * g.k_h + ki) * g.k_w + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.in_h as isize {
                        continue;
                    }
                    let dst = &mut dxc[ih as usize * g.in_w..(ih as usize + 1) * g.in_w];
                    for ow in 0..g.out_w {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        if iw >= 0 && iw < g.in_w as isize {
                            dst[iw as usize] += src[oh * g.out_w + ow];
                        }
                    }
                }
            }
        }
    }
}

fn sample_cols<'a, T: Scalar>(x_s: &'a [T], g: &ConvGeom) -> Cow<'a, [T]> {
    if g.is_pointwise() {
        Cow::Borrowed(x_s)
    } else {
        let mut cols = vec![T::ZERO; g.patch_len() * g.out_plane()];
        im2col(x_s, g, &mut cols);
        Cow::Owned(cols)
    }
}

pub fn conv2d_forward<T: Scalar>(x: &[T], w: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let plane = g.out_plane();
    let mut out = vec![T::ZERO; g.batch * g.out_c * plane];
    exec::for_each_chunk(&mut out, g.out_c * plane, |s, out_s| {
        let cols = sample_cols(&x[s * g.in_sample()..(s + 1) * g.in_sample()], g);
        gemm(g.out_c, g.patch_len(), plane, T::ONE, w, Layout::N, &cols, Layout::N, T::ZERO, out_s);
        if let Some(b) = bias {
            for (row, &bv) in out_s.chunks_mut(plane).zip(b) {
                row.iter_mut().for_each(|v| *v += bv);
            }
        }
    });
    out
}

pub fn conv2d_backward_input<T: Scalar>(w: &[T], dout: &[T], g: &ConvGeom) -> Vec<T> {
    let plane = g.out_plane();
    let mut dx = vec![T::ZERO; g.batch * g.in_sample()];
    exec::for_each_chunk(&mut dx, g.in_sample(), |s, dx_s| {
        let dout_s = &dout[s * g.out_c * plane..(s + 1) * g.out_c * plane];
        if g.is_pointwise() {
            gemm(g.in_c, g.out_c, plane, T::ONE, w, Layout::T, dout_s, Layout::N, T::ZERO, dx_s);
        } else {
            let mut dcols = vec![T::ZERO; g.patch_len() * plane];
            gemm(g.patch_len(), g.out_c, plane, T::ONE, w, Layout::T, dout_s, Layout::N, T::ZERO, &mut dcols);
            col2im(&dcols, g, dx_s);
        }
    });
    dx
}

pub fn conv2d_backward_weight<T: Scalar>(x: &[T], dout: &[T], g: &ConvGeom) -> Vec<T> {
    let plane = g.out_plane();
    let wlen = g.out_c * g.patch_len();
    let groups = g.batch.div_ceil(GRAD_GROUP);
    let partials = exec::map_indices(groups, |gi| {
        let mut acc = vec![T::ZERO; wlen];
        for s in gi * GRAD_GROUP..((gi + 1) * GRAD_GROUP).min(g.batch) {
            let cols = sample_cols(&x[s * g.in_sample()..(s + 1) * g.in_sample()], g);
            let dout_s = &dout[s * g.out_c * plane..(s + 1) * g.out_c * plane];
            gemm(g.out_c, plane, g.patch_len(), T::ONE, dout_s, Layout::N, &cols, Layout::T, T::ONE, &mut acc);
        }
        acc
    });
    sum_partials(partials, wlen)
}

pub fn conv2d_backward_bias<T: Scalar>(dout: &[T], g: &ConvGeom) -> Vec<T> {
    let plane = g.out_plane();
    let mut db = vec![T::ZERO; g.out_c];
    for s in 0..g.batch {
        for (co, d) in db.iter_mut().enumerate() {
            let base = (s * g.out_c + co) * plane;
            *d += dout[base..base + plane].iter().copied().sum::<T>();
        }
    }
    db
}

fn sum_partials<T: Scalar>(partials: Vec<Vec<T>>, len: usize) -> Vec<T> {
    let mut iter = partials.into_iter();
    let mut total = iter.next().unwrap_or_else(|| vec![T::ZERO; len]);
    for p in iter {
        total.iter_mut().zip(&p).for_each(|(t, v)| *t += *v);
    }
    total
}

/// `y[B,F_out] = x[B,F_in] * w[F_out,F_in]^T + b`.
pub fn linear_forward<T: Scalar>(x: &[T], w: &[T], b: &[T], batch: usize, f_in: usize, f_out: usize) -> Vec<T> {
    let mut y = Vec::with_capacity(batch * f_out);
    for _ in 0..batch {
        y.extend_from_slice(b);
    }
    gemm(batch, f_in, f_out, T::ONE, x, Layout::N, w, Layout::T, T::ONE, &mut y);
    y
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeom {
    pub batch: usize,
    pub channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub k: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl PoolGeom {
    pub fn new(input: &[usize], k: usize, stride: usize) -> Result<Self, TensorError> {
        if input.len() != 4 {
            return Err(shape_err("max_pool2d", format!("expected 4-d input, got {input:?}")));
        }
        if k == 0 || stride == 0 {
            return Err(config_err("max_pool2d", "window and stride must be at least 1"));
        }
        if k > input[2] || k > input[3] {
            return Err(config_err("max_pool2d", format!("window {k} larger than input {}x{}", input[2], input[3])));
        }
        Ok(Self {
            batch: input[0],
            channels: input[1],
            in_h: input[2],
            in_w: input[3],
            k,
            stride,
            out_h: (input[2] - k) / stride + 1,
            out_w: (input[3] - k) / stride + 1,
        })
    }
}

/// Windowed max; returns values and the flat input index of each winner.
/// Ties go to the first element in row-major scan order.
pub fn max_pool_forward<T: Scalar>(x: &[T], g: &PoolGeom) -> (Vec<T>, Vec<usize>) {
    let planes = g.batch * g.channels;
    let mut out = Vec::with_capacity(planes * g.out_h * g.out_w);
    let mut arg = Vec::with_capacity(out.capacity());
    for p in 0..planes {
        let base = p * g.in_h * g.in_w;
        for oh in 0..g.out_h {
            for ow in 0..g.out_w {
                let mut best = base + oh * g.stride * g.in_w + ow * g.stride;
                for i in 0..g.k {
                    for j in 0..g.k {
                        let idx = base + (oh * g.stride + i) * g.in_w + ow * g.stride + j;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BnMode {
    Train,
    Eval,
}

/// Per-channel statistics kept by a batchnorm forward for its backward.
#[derive(Clone, Debug)]
pub struct BnSaved<T> {
    pub mean: Vec<T>,
    pub inv_std: Vec<T>,
    pub mode: BnMode,
}

/// Batch statistics of a train-mode forward, for running-stat updates.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased (n-1) variance.
    pub var: Vec<T>,
}

pub struct BnGeom {
    pub batch: usize,
    pub channels: usize,
    pub plane: usize,
}

impl BnGeom {
    fn count(&self) -> usize {
        self.batch * self.plane
    }

    fn channel_slices<'a, T>(&self, x: &'a [T], c: usize) -> impl Iterator<Item = &'a [T]> + 'a {
        let (channels, plane) = (self.channels, self.plane);
        (0..self.batch).map(move |b| &x[(b * channels + c) * plane..(b * channels + c + 1) * plane])
    }
}

pub fn batchnorm_train_stats<T: Scalar>(x: &[T], g: &BnGeom, eps: T) -> (BnSaved<T>, BatchStats<T>) {
    let n = T::from_usize(g.count());
    let mut mean = Vec::with_capacity(g.channels);
    let mut inv_std = Vec::with_capacity(g.channels);
    let mut unbiased = Vec::with_capacity(g.channels);
    for c in 0..g.channels {
        let m0 = g.channel_slices(x, c).flat_map(|s| s.iter().copied()).sum::<T>() / n;
        // Compensation pass: exact for constant channels, tighter otherwise.
        let m = m0 + g.channel_slices(x, c).flat_map(|s| s.iter()).map(|&v| v - m0).sum::<T>() / n;
        let ss = g.channel_slices(x, c).flat_map(|s| s.iter()).map(|&v| (v - m) * (v - m)).sum::<T>();
        mean.push(m);
        inv_std.push(T::ONE / (ss / n + eps).sqrt());
        unbiased.push(ss / T::from_usize(g.count() - 1));
    }
    (BnSaved { mean: mean.clone(), inv_std, mode: BnMode::Train }, BatchStats { mean, var: unbiased })
}

pub fn batchnorm_eval_stats<T: Scalar>(running_mean: &[T], running_var: &[T], eps: T) -> BnSaved<T> {
    BnSaved {
        mean: running_mean.to_vec(),
        inv_std: running_var.iter().map(|&v| T::ONE / (v + eps).sqrt()).collect(),
        mode: BnMode::Eval,
    }
}

pub fn batchnorm_apply<T: Scalar>(x: &[T], g: &BnGeom, saved: &BnSaved<T>, gamma: &[T], beta: &[T]) -> Vec<T> {
    let mut y = vec![T::ZERO; x.len()];
    for b in 0..g.batch {
        for c in 0..g.channels {
            let r = (b * g.channels + c) * g.plane..(b * g.channels + c + 1) * g.plane;
            let (m, s, ga, be) = (saved.mean[c], saved.inv_std[c], gamma[c], beta[c]);
            for (o, &v) in y[r.clone()].iter_mut().zip(&x[r]) {
                *o = (v - m) * s * ga + be;
            }
        }
    }
    y
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn batchnorm_backward<T: Scalar>(
    x: &[T],
    dy: &[T],
    g: &BnGeom,
    saved: &BnSaved<T>,
    gamma: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let n = T::from_usize(g.count());
    let mut dgamma = vec![T::ZERO; g.channels];
    let mut dbeta = vec![T::ZERO; g.channels];
    for c in 0..g.channels {
        let (m, s) = (saved.mean[c], saved.inv_std[c]);
        for (xs, ds) in g.channel_slices(x, c).zip(g.channel_slices(dy, c)) {
            for (&v, &d) in xs.iter().zip(ds) {
                dbeta[c] += d;
                dgamma[c] += d * (v - m) * s;
            }
        }
    }
    let mut dx = vec![T::ZERO; x.len()];
    for b in 0..g.batch {
        for c in 0..g.channels {
            let r = (b * g.channels + c) * g.plane..(b * g.channels + c + 1) * g.plane;
            let (m, s, ga) = (saved.mean[c], saved.inv_std[c], gamma[c]);
            match saved.mode {
                BnMode::Train => {
                    let k = ga * s / n;
                    for ((o, &v), &d) in dx[r.clone()].iter_mut().zip(&x[r.clone()]).zip(&dy[r]) {
                        let xhat = (v - m) * s;
                        *o = k * (n * d - dbeta[c] - xhat * dgamma[c]);
                    }
                }
                BnMode::Eval => {
                    for (o, &d) in dx[r.clone()].iter_mut().zip(&dy[r]) {
                        *o = d * ga * s;
                    }
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Row-wise softmax of `logits / tau`, max-subtracted.
pub fn softmax_rows<T: Scalar>(logits: &[T], classes: usize, tau: T) -> Vec<T> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(classes) {
        let mx = row.iter().fold(row[0], |a, &b| a.max(b));
        let start = out.len();
        out.extend(row.iter().map(|&v| ((v - mx) / tau).exp()));
        let z: T = out[start..].iter().copied().sum();
        out[start..].iter_mut().for_each(|v| *v = *v / z);
    }
    out
}

/// Row-wise log-softmax of `logits / tau`.
pub fn log_softmax_rows<T: Scalar>(logits: &[T], classes: usize, tau: T) -> Vec<T> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(classes) {
        let mx = row.iter().fold(row[0], |a, &b| a.max(b));
        let lse = row.iter().map(|&v| ((v - mx) / tau).exp()).sum::<T>().ln();
        out.extend(row.iter().map(|&v| (v - mx) / tau - lse));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_geometry() {
        let g = ConvGeom::new(&[1, 3, 32, 32], &[16, 3, 3, 3], 1, 1).unwrap();
        assert_eq!(g.out_shape(), [1, 16, 32, 32]);
        let g = ConvGeom::new(&[2, 64, 16, 16], &[256, 64, 3, 3], 2, 1).unwrap();
        assert_eq!(g.out_shape(), [2, 256, 8, 8]);
        assert!(ConvGeom::new(&[1, 3, 2, 2], &[1, 3, 5, 5], 1, 0).is_err());
        assert!(ConvGeom::new(&[1, 3, 8, 8], &[1, 4, 3, 3], 1, 0).is_err());
    }

    #[test]
    fn im2col_col2im_adjoint() {
        // <im2col(x), c> == <x, col2im(c)> for any x, c.
        let g = ConvGeom::new(&[1, 2, 5, 4], &[1, 2, 3, 2], 2, 1).unwrap();
        let x: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let n = g.patch_len() * g.out_plane();
        let c: Vec<f64> = (0..n).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut cols = vec![0.0; n];
        im2col(&x, &g, &mut cols);
        let mut back = vec![0.0; 40];
        col2im(&c, &g, &mut back);
        let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_normalize() {
        let p = softmax_rows(&[1.0f64, 3.0, 0.0, 0.0], 2, 1.0);
        assert!((p[0] - 0.11920292202211755).abs() < 1e-12);
        assert!((p[2] - 0.5).abs() < 1e-15);
        let lp = log_softmax_rows(&[1.0f64, 3.0], 2, 1.0);
        assert!((lp[1].exp() - p[1]).abs() < 1e-12);
    }
}
