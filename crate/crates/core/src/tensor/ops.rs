//! Forward and backward kernels.
//!
//! Conventions: convolution is cross-correlation (no kernel flip); "same" padding
//! yields `ceil(in / stride)` outputs and pads symmetrically with zeros, putting the
//! extra pixel on the bottom/right when the total pad is odd; bilinear resizing
//! samples pixel centres (align-corners = false).

use std::ops::Range;

use rayon::prelude::*;

use super::{Real, Shape, Tensor};
use crate::{Error, Result};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_DECAY: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub dilation: usize,
    pub groups: usize,
    pub padding: Padding,
}

impl Default for ConvGeometry {
    fn default() -> Self {
        ConvGeometry {
            stride: 1,
            dilation: 1,
            groups: 1,
            padding: Padding::Same,
        }
    }
}

impl ConvGeometry {
    pub fn same(stride: usize, dilation: usize, groups: usize) -> Self {
        ConvGeometry {
            stride,
            dilation,
            groups,
            padding: Padding::Same,
        }
    }

    /// Output length and leading pad along one axis.
    pub fn axis(&self, input: usize, kernel: usize) -> Result<(usize, usize)> {
        if self.stride == 0 || self.dilation == 0 || self.groups == 0 {
            return Err(Error::Shape("stride, dilation and groups must be positive".into()));
        }
        let span = self.dilation * (kernel - 1) + 1;
        match self.padding {
            Padding::Same => {
                if kernel.is_multiple_of(2) {
                    return Err(Error::Shape(format!("same padding needs an odd kernel, got {kernel}")));
                }
                let out = input.div_ceil(self.stride);
                let total = ((out - 1) * self.stride + span).saturating_sub(input);
                Ok((out, total / 2))
            }
            Padding::Valid => {
                if input < span {
                    return Err(Error::Shape(format!(
                        "valid convolution needs input >= {span}, got {input}"
                    )));
                }
                Ok(((input - span) / self.stride + 1, 0))
            }
        }
    }
}

/// Kernel, optional bias and geometry of one convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T: Real = f32> {
    /// Shape `(c_out, c_in / groups, k_h, k_w)`.
    pub kernel: Tensor<T>,
    pub bias: Option<Vec<T>>,
    pub geometry: ConvGeometry,
}

struct ConvPlan {
    x: Shape,
    k: Shape,
    out: Shape,
    pad_top: usize,
    pad_left: usize,
    cin_g: usize,
    cout_g: usize,
    stride: usize,
    dilation: usize,
}

impl ConvPlan {
    fn new(x: Shape, k: Shape, geom: &ConvGeometry) -> Result<Self> {
        let groups = geom.groups.max(1);
        if x.c != groups * k.c {
            return Err(Error::Shape(format!(
                "input has {} channels but groups ({groups}) x kernel input channels ({}) = {}",
                x.c,
                k.c,
                groups * k.c
            )));
        }
        if !k.n.is_multiple_of(groups) {
            return Err(Error::Shape(format!(
                "output channels {} not divisible by groups {groups}",
                k.n
            )));
        }
        let (oh, pad_top) = geom.axis(x.h, k.h)?;
        let (ow, pad_left) = geom.axis(x.w, k.w)?;
        Ok(ConvPlan {
            x,
            k,
            out: Shape::new(x.n, k.n, oh, ow),
            pad_top,
            pad_left,
            cin_g: k.c,
            cout_g: k.n / groups,
            stride: geom.stride,
            dilation: geom.dilation,
        })
    }

    fn offset(&self, tap: usize, pad: usize) -> isize {
        (tap * self.dilation) as isize - pad as isize
    }

    /// Kernel taps that touch the input at all, with their valid output ranges.
    fn taps(&self) -> Vec<Tap> {
        let mut taps = Vec::with_capacity(self.k.h * self.k.w);
        for ky in 0..self.k.h {
            let offy = self.offset(ky, self.pad_top);
            let ry = tap_range(self.out.h, self.x.h, self.stride, offy);
            for kx in 0..self.k.w {
                let offx = self.offset(kx, self.pad_left);
                let rx = tap_range(self.out.w, self.x.w, self.stride, offx);
                if rx.is_empty() || ry.is_empty() {
                    continue;
                }
                let whole_plane = self.stride == 1
                    && offx == 0
                    && offy == 0
                    && (self.out.h, self.out.w) == (self.x.h, self.x.w);
                taps.push(Tap { ky, kx, offy, offx, ry: ry.clone(), rx, whole_plane });
            }
        }
        taps
    }
}

struct Tap {
    ky: usize,
    kx: usize,
    offy: isize,
    offx: isize,
    ry: Range<usize>,
    rx: Range<usize>,
    /// The tap maps the input plane onto the output plane one to one.
    whole_plane: bool,
}

/// Output indices `o` for which `o * stride + offset` lands inside `0..in_len`.
#[inline]
fn tap_range(out_len: usize, in_len: usize, stride: usize, offset: isize) -> Range<usize> {
    let lo = if offset >= 0 {
        0
    } else {
        (offset.unsigned_abs()).div_ceil(stride)
    };
    let last = in_len as isize - 1 - offset;
    if last < 0 {
        return 0..0;
    }
    let hi = (last as usize / stride + 1).min(out_len);
    lo.min(hi)..hi
}

/// 2-D convolution over an NCHW batch.
pub fn conv2d<T: Real>(x: &Tensor<T>, p: &ConvParams<T>) -> Result<Tensor<T>> {
    conv2d_forward(x, &p.kernel, p.bias.as_deref(), &p.geometry)
}

/// Convolution with one kernel plane per channel (`groups = c_in = c_out`).
pub fn depthwise_conv2d<T: Real>(x: &Tensor<T>, p: &ConvParams<T>) -> Result<Tensor<T>> {
    let k = p.kernel.shape();
    if k.n != x.shape().c || k.c != 1 || p.geometry.groups != x.shape().c {
        return Err(Error::Shape(format!(
            "depthwise convolution needs a ({}, 1, kh, kw) kernel with groups = {}, got kernel {k} with groups {}",
            x.shape().c,
            x.shape().c,
            p.geometry.groups
        )));
    }
    conv2d(x, p)
}

pub fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&[T]>,
    geom: &ConvGeometry,
) -> Result<Tensor<T>> {
    let plan = ConvPlan::new(x.shape(), kernel.shape(), geom)?;
    if let Some(b) = bias {
        if b.len() != plan.out.c {
            return Err(Error::Shape(format!(
                "bias has {} entries for {} output channels",
                b.len(),
                plan.out.c
            )));
        }
    }
    let (xs, ks, os) = (plan.x, plan.k, plan.out);
    let mut out = Tensor::zeros(os);
    let xd = x.data();
    let kd = kernel.data();
    let s = plan.stride;
    let taps = plan.taps();
    // Output planes are independent, so they are filled in parallel.
    out.data_mut()
        .par_chunks_mut(os.plane().max(1))
        .enumerate()
        .for_each(|(i, out_plane)| {
            let (n, oc) = (i / os.c, i % os.c);
            let g = oc / plan.cout_g;
            if let Some(b) = bias {
                out_plane.iter_mut().for_each(|v| *v = b[oc]);
            }
            for icg in 0..plan.cin_g {
                let ic = g * plan.cin_g + icg;
                let i_start = (n * xs.c + ic) * xs.plane();
                let in_plane = &xd[i_start..i_start + xs.plane()];
                let k_start = (oc * ks.c + icg) * ks.h * ks.w;
                for tap in &taps {
                    let wv = kd[k_start + tap.ky * ks.w + tap.kx];
                    if tap.whole_plane {
                        for (o, &i) in out_plane.iter_mut().zip(in_plane) {
                            *o += wv * i;
                        }
                        continue;
                    }
                    let (rx, offx, offy) = (tap.rx.clone(), tap.offx, tap.offy);
                    for oy in tap.ry.clone() {
                        let iy = ((oy * s) as isize + offy) as usize;
                        let in_row = &in_plane[iy * xs.w..(iy + 1) * xs.w];
                        let out_row = &mut out_plane[oy * os.w..(oy + 1) * os.w];
                        if s == 1 {
                            let ix0 = (rx.start as isize + offx) as usize;
                            let src = &in_row[ix0..ix0 + rx.len()];
                            for (o, &i) in out_row[rx.clone()].iter_mut().zip(src) {
                                *o += wv * i;
                            }
                        } else {
                            for ox in rx.clone() {
                                out_row[ox] += wv * in_row[((ox * s) as isize + offx) as usize];
                            }
                        }
                    }
                }
            }
        });
    Ok(out)
}

/// Gradients of a convolution: `(d input, d kernel, d bias)`.
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    geom: &ConvGeometry,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Vec<T>)> {
    let plan = ConvPlan::new(x.shape(), kernel.shape(), geom)?;
    if grad_out.shape() != plan.out {
        return Err(Error::Shape(format!(
            "output gradient {} does not match convolution output {}",
            grad_out.shape(),
            plan.out
        )));
    }
    let (xs, ks, os) = (plan.x, plan.k, plan.out);
    let mut gx = Tensor::zeros(xs);
    let s = plan.stride;
    let xd = x.data();
    let kd = kernel.data();
    let gd = grad_out.data();
    let taps = plan.taps();
    // Each batch item owns its slice of the input gradient and produces partial
    // kernel/bias gradients (accumulated in f64), reduced afterwards in batch order
    // so the result does not depend on scheduling.
    let partials: Vec<(Vec<f64>, Vec<f64>)> = gx
        .data_mut()
        .par_chunks_mut((xs.c * xs.plane()).max(1))
        .enumerate()
        .map(|(n, gin_item)| {
            let mut gk = vec![0.0f64; ks.numel()];
            let mut gb = vec![0.0f64; os.c];
            for (oc, gb_oc) in gb.iter_mut().enumerate() {
                let g = oc / plan.cout_g;
                let o_start = (n * os.c + oc) * os.plane();
                let g_plane = &gd[o_start..o_start + os.plane()];
                *gb_oc += g_plane.iter().map(|v| v.as_f64()).sum::<f64>();
                for icg in 0..plan.cin_g {
                    let ic = g * plan.cin_g + icg;
                    let i_start = (n * xs.c + ic) * xs.plane();
                    let in_plane = &xd[i_start..i_start + xs.plane()];
                    let gin_plane = &mut gin_item[ic * xs.plane()..(ic + 1) * xs.plane()];
                    for tap in &taps {
                        let kidx = ((oc * ks.c + icg) * ks.h + tap.ky) * ks.w + tap.kx;
                        let wv = kd[kidx];
                        let (rx, offx, offy) = (tap.rx.clone(), tap.offx, tap.offy);
                        let mut acc = 0.0f64;
                        for oy in tap.ry.clone() {
                            let iy = ((oy * s) as isize + offy) as usize;
                            let in_row = &in_plane[iy * xs.w..(iy + 1) * xs.w];
                            let gin_row = &mut gin_plane[iy * xs.w..(iy + 1) * xs.w];
                            let g_row = &g_plane[oy * os.w..(oy + 1) * os.w];
                            let mut row_acc = T::zero();
                            if s == 1 {
                                let ix0 = (rx.start as isize + offx) as usize;
                                let len = rx.len();
                                let gsl = &g_row[rx.clone()];
                                for ((gi, &xi), &go) in gin_row[ix0..ix0 + len]
                                    .iter_mut()
                                    .zip(&in_row[ix0..ix0 + len])
                                    .zip(gsl)
                                {
                                    *gi += wv * go;
                                    row_acc += xi * go;
                                }
                            } else {
                                for ox in rx.clone() {
                                    let ix = ((ox * s) as isize + offx) as usize;
                                    gin_row[ix] += wv * g_row[ox];
                                    row_acc += in_row[ix] * g_row[ox];
                                }
                            }
                            acc += row_acc.as_f64();
                        }
                        gk[kidx] += acc;
                    }
                }
            }
            (gk, gb)
        })
        .collect();
    let mut gk = vec![0.0f64; ks.numel()];
    let mut gb = vec![0.0f64; os.c];
    for (pk, pb) in partials {
        gk.iter_mut().zip(pk).for_each(|(a, b)| *a += b);
        gb.iter_mut().zip(pb).for_each(|(a, b)| *a += b);
    }
    let gk = Tensor::from_vec(ks, gk.into_iter().map(T::of).collect())?;
    Ok((gx, gk, gb.into_iter().map(T::of).collect()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Inference,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams<T: Real = f32> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub epsilon: f64,
    pub decay: f64,
    pub mode: BnMode,
}

impl<T: Real> BatchNormParams<T> {
    pub fn new(channels: usize) -> Self {
        BatchNormParams {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            epsilon: BN_EPSILON,
            decay: BN_DECAY,
            mode: BnMode::Train,
        }
    }
}

/// Batch statistics kept for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BnCache<T: Real> {
    pub mean: Vec<T>,
    /// Biased variance over `(n, h, w)`.
    pub var: Vec<T>,
    pub inv_std: Vec<T>,
}

fn check_channels<T: Real>(x: &Tensor<T>, what: &str, len: usize) -> Result<()> {
    if len != x.shape().c {
        return Err(Error::Shape(format!(
            "batchnorm {what} has {len} entries for {} channels",
            x.shape().c
        )));
    }
    Ok(())
}

/// Batch normalisation; train mode also folds the batch statistics into the running
/// estimates with an exponential moving average.
pub fn batchnorm<T: Real>(x: &Tensor<T>, p: &mut BatchNormParams<T>) -> Result<Tensor<T>> {
    match p.mode {
        BnMode::Train => {
            let (y, cache) = batchnorm_train_forward(x, &p.gamma, &p.beta, p.epsilon)?;
            update_running_stats(&mut p.running_mean, &mut p.running_var, &cache, p.decay);
            Ok(y)
        }
        BnMode::Inference => {
            batchnorm_inference_forward(x, &p.gamma, &p.beta, &p.running_mean, &p.running_var, p.epsilon)
        }
    }
}

pub fn update_running_stats<T: Real>(mean: &mut [T], var: &mut [T], cache: &BnCache<T>, decay: f64) {
    let d = T::of(decay);
    let keep = T::one() - d;
    for (m, &b) in mean.iter_mut().zip(&cache.mean) {
        *m = d * *m + keep * b;
    }
    for (v, &b) in var.iter_mut().zip(&cache.var) {
        *v = d * *v + keep * b;
    }
}

pub fn batchnorm_train_forward<T: Real>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    epsilon: f64,
) -> Result<(Tensor<T>, BnCache<T>)> {
    check_channels(x, "gamma", gamma.len())?;
    check_channels(x, "beta", beta.len())?;
    let s = x.shape();
    let count = (s.n * s.plane()) as f64;
    let mut cache = BnCache {
        mean: Vec::with_capacity(s.c),
        var: Vec::with_capacity(s.c),
        inv_std: Vec::with_capacity(s.c),
    };
    for c in 0..s.c {
        let mut sum = 0.0f64;
        for n in 0..s.n {
            sum += x.plane(n, c).iter().map(|v| v.as_f64()).sum::<f64>();
        }
        let mean = sum / count;
        let mut sq = 0.0f64;
        for n in 0..s.n {
            sq += x.plane(n, c).iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>();
        }
        let var = sq / count;
        cache.mean.push(T::of(mean));
        cache.var.push(T::of(var));
        cache.inv_std.push(T::of(1.0 / (var + epsilon).sqrt()));
    }
    let y = normalize_affine(x, gamma, beta, &cache.mean, &cache.inv_std);
    Ok((y, cache))
}

fn normalize_affine<T: Real>(x: &Tensor<T>, gamma: &[T], beta: &[T], mean: &[T], inv_std: &[T]) -> Tensor<T> {
    let s = x.shape();
    let mut y = x.clone();
    let plane = s.plane();
    for (i, chunk) in y.data_mut().chunks_exact_mut(plane).enumerate() {
        let c = i % s.c;
        let scale = gamma[c] * inv_std[c];
        let (m, b) = (mean[c], beta[c]);
        chunk.iter_mut().for_each(|v| *v = (*v - m) * scale + b);
    }
    y
}

/// Returns `(d x, d gamma, d beta)` for a train-mode batchnorm.
pub fn batchnorm_train_backward<T: Real>(
    x: &Tensor<T>,
    gamma: &[T],
    cache: &BnCache<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    let s = x.shape();
    if grad_out.shape() != s {
        return Err(Error::Shape(format!("batchnorm gradient {} vs input {s}", grad_out.shape())));
    }
    let count = (s.n * s.plane()) as f64;
    let mut gx = Tensor::zeros(s);
    let mut ggamma = vec![T::zero(); s.c];
    let mut gbeta = vec![T::zero(); s.c];
    for c in 0..s.c {
        let (mean, inv_std) = (cache.mean[c].as_f64(), cache.inv_std[c].as_f64());
        let (mut sum_g, mut sum_gx) = (0.0f64, 0.0f64);
        for n in 0..s.n {
            for (&xv, &gv) in x.plane(n, c).iter().zip(grad_out.plane(n, c)) {
                let g = gv.as_f64();
                sum_g += g;
                sum_gx += g * (xv.as_f64() - mean) * inv_std;
            }
        }
        ggamma[c] = T::of(sum_gx);
        gbeta[c] = T::of(sum_g);
        let k = gamma[c].as_f64() * inv_std / count;
        for n in 0..s.n {
            let start = gx.index(n, c, 0, 0);
            let dst = &mut gx.data_mut()[start..start + s.plane()];
            for ((d, &xv), &gv) in dst.iter_mut().zip(x.plane(n, c)).zip(grad_out.plane(n, c)) {
                let xhat = (xv.as_f64() - mean) * inv_std;
                *d = T::of(k * (count * gv.as_f64() - sum_g - xhat * sum_gx));
            }
        }
    }
    Ok((gx, ggamma, gbeta))
}

pub fn batchnorm_inference_forward<T: Real>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
    epsilon: f64,
) -> Result<Tensor<T>> {
    check_channels(x, "gamma", gamma.len())?;
    check_channels(x, "beta", beta.len())?;
    check_channels(x, "running_mean", running_mean.len())?;
    check_channels(x, "running_var", running_var.len())?;
    let inv_std: Vec<T> = running_var
        .iter()
        .map(|v| T::of(1.0 / (v.as_f64().max(0.0) + epsilon).sqrt()))
        .collect();
    Ok(normalize_affine(x, gamma, beta, running_mean, &inv_std))
}

pub fn batchnorm_inference_backward<T: Real>(
    x: &Tensor<T>,
    gamma: &[T],
    running_mean: &[T],
    running_var: &[T],
    epsilon: f64,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    let s = x.shape();
    let mut gx = grad_out.clone();
    let mut ggamma = vec![T::zero(); s.c];
    let mut gbeta = vec![T::zero(); s.c];
    for c in 0..s.c {
        let inv = 1.0 / (running_var[c].as_f64().max(0.0) + epsilon).sqrt();
        let inv_std = T::of(inv);
        let scale = gamma[c] * inv_std;
        let mean = running_mean[c].as_f64();
        let (mut sum_gx, mut sum_g) = (0.0f64, 0.0f64);
        for n in 0..s.n {
            for (&xv, &gv) in x.plane(n, c).iter().zip(grad_out.plane(n, c)) {
                sum_gx += gv.as_f64() * (xv.as_f64() - mean) * inv;
                sum_g += gv.as_f64();
            }
            let start = gx.index(n, c, 0, 0);
            gx.data_mut()[start..start + s.plane()].iter_mut().for_each(|g| *g *= scale);
        }
        ggamma[c] = T::of(sum_gx);
        gbeta[c] = T::of(sum_g);
    }
    Ok((gx, ggamma, gbeta))
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Real>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let mut g = grad_out.clone();
    g.data_mut()
        .iter_mut()
        .zip(x.data())
        .for_each(|(g, &v)| {
            if v <= T::zero() {
                *g = T::zero();
            }
        });
    g
}

#[inline]
pub fn sigmoid_scalar<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

/// Sigmoid backward from the forward output `y`.
pub fn sigmoid_backward<T: Real>(y: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let mut g = grad_out.clone();
    g.data_mut()
        .iter_mut()
        .zip(y.data())
        .for_each(|(g, &p)| *g *= p * (T::one() - p));
    g
}

/// Interpolation taps `(i0, i1, weight of i1)` for each output index.
fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let lambda = if i0 == i1 { 0.0 } else { src - i0 as f64 };
            (i0, i1, lambda)
        })
        .collect()
}

/// Bilinear resize to `out_h × out_w` with half-pixel centres.
pub fn bilinear_resize<T: Real>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if out_h == 0 || out_w == 0 {
        return Err(Error::Shape("resize target must be positive".into()));
    }
    let ty = bilinear_taps(s.h, out_h);
    let tx: Vec<(usize, usize, T)> = bilinear_taps(s.w, out_w)
        .into_iter()
        .map(|(a, b, l)| (a, b, T::of(l)))
        .collect();
    let os = Shape::new(s.n, s.c, out_h, out_w);
    let mut out = Tensor::zeros(os);
    let mut row0 = vec![T::zero(); out_w];
    let mut row1 = vec![T::zero(); out_w];
    for n in 0..s.n {
        for c in 0..s.c {
            let src = x.plane(n, c);
            let start = out.index(n, c, 0, 0);
            let dst = &mut out.data_mut()[start..start + os.plane()];
            for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                let ly = T::of(ly);
                let (r0, r1) = (&src[y0 * s.w..(y0 + 1) * s.w], &src[y1 * s.w..(y1 + 1) * s.w]);
                for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                    row0[ox] = r0[x0] + lx * (r0[x1] - r0[x0]);
                    row1[ox] = r1[x0] + lx * (r1[x1] - r1[x0]);
                }
                for (d, (&a, &b)) in dst[oy * out_w..(oy + 1) * out_w]
                    .iter_mut()
                    .zip(row0.iter().zip(&row1))
                {
                    *d = a + ly * (b - a);
                }
            }
        }
    }
    Ok(out)
}

pub fn bilinear_upsample<T: Real>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    if factor == 0 {
        return Err(Error::Shape("upsample factor must be >= 1".into()));
    }
    bilinear_resize(x, x.shape().h * factor, x.shape().w * factor)
}

pub fn bilinear_resize_backward<T: Real>(input: Shape, grad_out: &Tensor<T>) -> Tensor<T> {
    let os = grad_out.shape();
    let ty = bilinear_taps(input.h, os.h);
    let tx = bilinear_taps(input.w, os.w);
    let mut gx = Tensor::zeros(input);
    let mut acc = vec![0.0f64; input.plane()];
    for n in 0..input.n {
        for c in 0..input.c {
            let g = grad_out.plane(n, c);
            acc.iter_mut().for_each(|v| *v = 0.0);
            for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                    let v = g[oy * os.w + ox].as_f64();
                    let (top, bottom) = (v * (1.0 - ly), v * ly);
                    acc[y0 * input.w + x0] += top * (1.0 - lx);
                    acc[y0 * input.w + x1] += top * lx;
                    acc[y1 * input.w + x0] += bottom * (1.0 - lx);
                    acc[y1 * input.w + x1] += bottom * lx;
                }
            }
            let start = gx.index(n, c, 0, 0);
            gx.data_mut()[start..start + input.plane()]
                .iter_mut()
                .zip(&acc)
                .for_each(|(d, &a)| *d = T::of(a));
        }
    }
    gx
}

/// Stacks tensors along the channel axis in argument order.
pub fn concat_channels<T: Real>(xs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = xs
        .first()
        .ok_or_else(|| Error::Shape("concat needs at least one tensor".into()))?
        .shape();
    for t in xs {
        let s = t.shape();
        if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
            return Err(Error::Shape(format!("cannot concat {s} with {first}")));
        }
    }
    let c: usize = xs.iter().map(|t| t.shape().c).sum();
    let mut data = Vec::with_capacity(first.n * c * first.plane());
    for n in 0..first.n {
        for t in xs {
            let per = t.shape().c * first.plane();
            data.extend_from_slice(&t.data()[n * per..(n + 1) * per]);
        }
    }
    Tensor::from_vec(Shape::new(first.n, c, first.h, first.w), data)
}

/// Inverse of [`concat_channels`] for gradients.
pub fn split_channels<T: Real>(x: &Tensor<T>, sizes: &[usize]) -> Result<Vec<Tensor<T>>> {
    let s = x.shape();
    if sizes.iter().sum::<usize>() != s.c {
        return Err(Error::Shape(format!("channel split {sizes:?} does not sum to {}", s.c)));
    }
    let mut parts: Vec<Vec<T>> = sizes.iter().map(|&c| Vec::with_capacity(s.n * c * s.plane())).collect();
    for n in 0..s.n {
        let mut c0 = 0;
        for (part, &c) in parts.iter_mut().zip(sizes) {
            let start = x.index(n, c0, 0, 0);
            part.extend_from_slice(&x.data()[start..start + c * s.plane()]);
            c0 += c;
        }
    }
    parts
        .into_iter()
        .zip(sizes)
        .map(|(d, &c)| Tensor::from_vec(Shape::new(s.n, c, s.h, s.w), d))
        .collect()
}

/// Mean over each `h × w` plane, giving `(n, c, 1, 1)`.
pub fn global_avg_pool<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let inv = 1.0 / s.plane() as f64;
    let data = x
        .data()
        .chunks_exact(s.plane())
        .map(|p| T::of(p.iter().map(|v| v.as_f64()).sum::<f64>() * inv))
        .collect();
    Tensor::from_vec(Shape::new(s.n, s.c, 1, 1), data).expect("pool shape")
}

pub fn global_avg_pool_backward<T: Real>(input: Shape, grad_out: &Tensor<T>) -> Tensor<T> {
    let inv = T::of(1.0 / input.plane() as f64);
    let mut data = Vec::with_capacity(input.numel());
    for &g in grad_out.data() {
        data.extend(std::iter::repeat_n(g * inv, input.plane()));
    }
    Tensor::from_vec(input, data).expect("pool gradient shape")
}

pub fn add<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let mut out = a.clone();
    out.add_assign(b)?;
    Ok(out)
}
