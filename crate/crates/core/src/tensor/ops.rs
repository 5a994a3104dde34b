//! Forward and backward kernels on plain tensors.
//!
//! Convolutions are cross-correlations (no kernel flip). Dense convolutions
//! lower to im2col + GEMM; depthwise convolutions run direct loops.

use super::gemm::{matmul, Mat};
use super::{Shape, Tensor};
use crate::error::{Error, Result};

fn out_dim(input: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || padded < k {
        None
    } else {
        Some((padded - k) / stride + 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    fn cols_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.padding == 0
    }
}

fn conv_geom(
    op: &'static str,
    input: Shape,
    weight: Shape,
    groups_depthwise: bool,
    stride: usize,
    padding: usize,
) -> Result<ConvGeom> {
    if weight.h != weight.w {
        return Err(Error::shape(op, format!("kernel must be square, got {}x{}", weight.h, weight.w)));
    }
    if groups_depthwise {
        if weight.c != 1 || weight.n != input.c {
            return Err(Error::shape(
                op,
                format!(
                    "depthwise weight {} needs shape ({}, 1, k, k) for input channels {}",
                    weight, input.c, input.c
                ),
            ));
        }
    } else if weight.c != input.c {
        return Err(Error::shape(
            op,
            format!("weight c_in = {} but input has {} channels", weight.c, input.c),
        ));
    }
    let k = weight.h;
    let (oh, ow) = match (out_dim(input.h, k, stride, padding), out_dim(input.w, k, stride, padding)) {
        (Some(oh), Some(ow)) => (oh, ow),
        _ => {
            return Err(Error::shape(
                op,
                format!("kernel {k} stride {stride} padding {padding} does not fit input {}x{}", input.h, input.w),
            ))
        }
    };
    Ok(ConvGeom {
        c_in: input.c,
        h: input.h,
        w: input.w,
        k,
        stride,
        padding,
        oh,
        ow,
    })
}

/// Output columns `[lo, hi)` whose input column `ox * stride + kx - padding`
/// falls inside `[0, w)`.
fn valid_cols(g: &ConvGeom, kx: usize) -> (usize, usize) {
    let lo = g.padding.saturating_sub(kx).div_ceil(g.stride).min(g.ow);
    let hi = if g.w + g.padding > kx {
        ((g.w + g.padding - kx - 1) / g.stride + 1).min(g.ow)
    } else {
        0
    };
    (lo, hi.max(lo))
}

fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let p = g.positions();
    for ci in 0..g.c_in {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                let (lo, hi) = valid_cols(g, kx);
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    line[..lo].fill(0.0);
                    line[hi..].fill(0.0);
                    if lo < hi {
                        let ix0 = lo * g.stride + kx - g.padding;
                        if g.stride == 1 {
                            line[lo..hi].copy_from_slice(&src[ix0..ix0 + hi - lo]);
                        } else {
                            for (i, v) in line[lo..hi].iter_mut().enumerate() {
                                *v = src[ix0 + i * g.stride];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let p = g.positions();
    for ci in 0..g.c_in {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * p..(row + 1) * p];
                let (lo, hi) = valid_cols(g, kx);
                if lo >= hi {
                    continue;
                }
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let ix0 = lo * g.stride + kx - g.padding;
                    let s = &src[oy * g.ow + lo..oy * g.ow + hi];
                    if g.stride == 1 {
                        line[ix0..ix0 + hi - lo].iter_mut().zip(s).for_each(|(d, v)| *d += v);
                    } else {
                        for (i, v) in s.iter().enumerate() {
                            line[ix0 + i * g.stride] += v;
                        }
                    }
                }
            }
        }
    }
}

thread_local! {
    static SCRATCH: std::cell::RefCell<[Vec<f64>; 2]> = const { std::cell::RefCell::new([Vec::new(), Vec::new()]) };
}

/// Runs `f` with two reusable buffers of at least `a` and `b` elements.
/// Contents are unspecified on entry.
fn with_scratch<R>(a: usize, b: usize, f: impl FnOnce(&mut [f64], &mut [f64]) -> R) -> R {
    let [mut x, mut y] = SCRATCH.with(|s| std::mem::take(&mut *s.borrow_mut()));
    if x.len() < a {
        x.resize(a, 0.0);
    }
    if y.len() < b {
        y.resize(b, 0.0);
    }
    let r = f(&mut x[..a], &mut y[..b]);
    SCRATCH.with(|s| *s.borrow_mut() = [x, y]);
    r
}

fn check_vector(op: &'static str, what: &str, t: &Tensor, len: usize) -> Result<()> {
    if t.numel() != len {
        return Err(Error::shape(op, format!("{what} has {} entries, expected {len}", t.numel())));
    }
    Ok(())
}

/// Dense 2-D convolution. `weight` is `(c_out, c_in, k, k)`; `bias` has `c_out` entries.
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let g = conv_geom("conv2d", input.shape(), weight.shape(), false, stride, padding)?;
    let c_out = weight.shape().n;
    if let Some(b) = bias {
        check_vector("conv2d", "bias", b, c_out)?;
    }
    let n = input.shape().n;
    let out_shape = Shape::new(n, c_out, g.oh, g.ow);
    let mut out = vec![0.0; out_shape.numel()];
    let kk = g.cols_rows();
    let p = g.positions();
    let in_per = g.c_in * g.h * g.w;
    let cols_len = if g.is_pointwise() { 0 } else { kk * p };
    with_scratch(cols_len, 0, |cols, _| {
        for b in 0..n {
            let x = &input.data()[b * in_per..(b + 1) * in_per];
            let dst = &mut out[b * c_out * p..(b + 1) * c_out * p];
            let rhs: &[f64] = if g.is_pointwise() {
                x
            } else {
                im2col(x, &g, cols);
                cols
            };
            matmul(Mat::new(weight.data(), c_out, kk), Mat::new(rhs, kk, p), dst, 0.0);
            if let Some(bias) = bias {
                for (co, chunk) in dst.chunks_mut(p).enumerate() {
                    let bv = bias.data()[co];
                    chunk.iter_mut().for_each(|v| *v += bv);
                }
            }
        }
    });
    Tensor::from_vec(out_shape, out)
}

pub(crate) struct ConvGrads {
    pub input: Option<Tensor>,
    pub weight: Tensor,
    pub bias: Tensor,
}

pub(crate) fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    padding: usize,
    need_input: bool,
) -> Result<ConvGrads> {
    let g = conv_geom("conv2d", input.shape(), weight.shape(), false, stride, padding)?;
    let c_out = weight.shape().n;
    let n = input.shape().n;
    let kk = g.cols_rows();
    let p = g.positions();
    let in_per = g.c_in * g.h * g.w;
    let mut dw = vec![0.0; weight.numel()];
    let mut db = vec![0.0; c_out];
    let mut dx = if need_input { vec![0.0; input.numel()] } else { Vec::new() };
    let cols_len = if g.is_pointwise() { 0 } else { kk * p };
    let dcols_len = if need_input { cols_len } else { 0 };
    with_scratch(cols_len, dcols_len, |cols, dcols| {
        for b in 0..n {
            let x = &input.data()[b * in_per..(b + 1) * in_per];
            let dy = &grad_out.data()[b * c_out * p..(b + 1) * c_out * p];
            for (co, chunk) in dy.chunks(p).enumerate() {
                db[co] += lane_sum(chunk, chunk, |v, _| v);
            }
            let rhs: &[f64] = if g.is_pointwise() {
                x
            } else {
                im2col(x, &g, cols);
                cols
            };
            matmul(Mat::new(dy, c_out, p), Mat::new(rhs, kk, p).t(), &mut dw, 1.0);
            if need_input {
                let dxb = &mut dx[b * in_per..(b + 1) * in_per];
                if g.is_pointwise() {
                    matmul(Mat::new(weight.data(), c_out, kk).t(), Mat::new(dy, c_out, p), dxb, 0.0);
                } else {
                    matmul(Mat::new(weight.data(), c_out, kk).t(), Mat::new(dy, c_out, p), dcols, 0.0);
                    col2im_add(dcols, &g, dxb);
                }
            }
        }
    });
    Ok(ConvGrads {
        input: if need_input {
            Some(Tensor::from_vec(input.shape(), dx)?)
        } else {
            None
        },
        weight: Tensor::from_vec(weight.shape(), dw)?,
        bias: Tensor::vector(db),
    })
}

/// Per-channel convolution (groups = channels). `weight` is `(c, 1, k, k)`.
pub fn depthwise_conv2d(input: &Tensor, weight: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let g = conv_geom("depthwise_conv2d", input.shape(), weight.shape(), true, stride, padding)?;
    let n = input.shape().n;
    let c = g.c_in;
    let out_shape = Shape::new(n, c, g.oh, g.ow);
    let mut out = vec![0.0; out_shape.numel()];
    let (k, s, pad) = (g.k as isize, g.stride as isize, g.padding as isize);
    for b in 0..n {
        for ch in 0..c {
            let x = &input.data()[(b * c + ch) * g.h * g.w..(b * c + ch + 1) * g.h * g.w];
            let wk = &weight.data()[ch * g.k * g.k..(ch + 1) * g.k * g.k];
            let o = &mut out[(b * c + ch) * g.oh * g.ow..(b * c + ch + 1) * g.oh * g.ow];
            for oy in 0..g.oh as isize {
                for ox in 0..g.ow as isize {
                    let mut acc = 0.0;
                    for ky in 0..k {
                        let iy = oy * s + ky - pad;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = ox * s + kx - pad;
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            acc += wk[(ky * k + kx) as usize] * x[iy as usize * g.w + ix as usize];
                        }
                    }
                    o[(oy * g.ow as isize + ox) as usize] = acc;
                }
            }
        }
    }
    Tensor::from_vec(out_shape, out)
}

pub(crate) fn depthwise_conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    padding: usize,
    need_input: bool,
) -> Result<(Option<Tensor>, Tensor)> {
    let g = conv_geom("depthwise_conv2d", input.shape(), weight.shape(), true, stride, padding)?;
    let n = input.shape().n;
    let c = g.c_in;
    let mut dw = vec![0.0; weight.numel()];
    let mut dx = vec![0.0; if need_input { input.numel() } else { 0 }];
    let (k, s, pad) = (g.k as isize, g.stride as isize, g.padding as isize);
    for b in 0..n {
        for ch in 0..c {
            let base_in = (b * c + ch) * g.h * g.w;
            let x = &input.data()[base_in..base_in + g.h * g.w];
            let wk = &weight.data()[ch * g.k * g.k..(ch + 1) * g.k * g.k];
            let dy = &grad_out.data()[(b * c + ch) * g.oh * g.ow..(b * c + ch + 1) * g.oh * g.ow];
            let dwk = &mut dw[ch * g.k * g.k..(ch + 1) * g.k * g.k];
            for oy in 0..g.oh as isize {
                for ox in 0..g.ow as isize {
                    let go = dy[(oy * g.ow as isize + ox) as usize];
                    if go == 0.0 {
                        continue;
                    }
                    for ky in 0..k {
                        let iy = oy * s + ky - pad;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = ox * s + kx - pad;
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            let xi = iy as usize * g.w + ix as usize;
                            let wi = (ky * k + kx) as usize;
                            dwk[wi] += go * x[xi];
                            if need_input {
                                dx[base_in + xi] += go * wk[wi];
                            }
                        }
                    }
                }
            }
        }
    }
    let dx = if need_input {
        Some(Tensor::from_vec(input.shape(), dx)?)
    } else {
        None
    };
    Ok((dx, Tensor::from_vec(weight.shape(), dw)?))
}

/// Batch statistics produced by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance used for normalization.
    pub var: Vec<f64>,
    /// Number of values reduced per channel.
    pub count: usize,
}

pub(crate) struct BnTrainOut {
    pub output: Tensor,
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub stats: BatchStats,
}

fn check_bn(input: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<()> {
    if !(eps > 0.0) {
        return Err(Error::invalid("batchnorm2d", format!("eps must be > 0, got {eps}")));
    }
    let c = input.shape().c;
    check_vector("batchnorm2d", "gamma", gamma, c)?;
    check_vector("batchnorm2d", "beta", beta, c)
}

/// `sum f(x_i, y_i)` with four independent accumulators so the loop vectorizes.
#[inline]
fn lane_sum(x: &[f64], y: &[f64], f: impl Fn(f64, f64) -> f64) -> f64 {
    let mut acc = [0.0; 4];
    let (xc, yc) = (x.chunks_exact(4), y.chunks_exact(4));
    let (xr, yr) = (xc.remainder(), yc.remainder());
    for (a, b) in xc.zip(yc) {
        for l in 0..4 {
            acc[l] += f(a[l], b[l]);
        }
    }
    let tail: f64 = xr.iter().zip(yr).map(|(&a, &b)| f(a, b)).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub(crate) fn batchnorm_train(input: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<BnTrainOut> {
    check_bn(input, gamma, beta, eps)?;
    let s = input.shape();
    let hw = s.plane();
    let count = s.n * hw;
    let x = input.data();
    let mut mean = vec![0.0; s.c];
    let mut var = vec![0.0; s.c];
    for c in 0..s.c {
        let mut acc = 0.0;
        for b in 0..s.n {
            let off = (b * s.c + c) * hw;
            let xs = &x[off..off + hw];
            acc += lane_sum(xs, xs, |v, _| v);
        }
        let m = acc / count as f64;
        let mut acc2 = 0.0;
        for b in 0..s.n {
            let off = (b * s.c + c) * hw;
            let xs = &x[off..off + hw];
            acc2 += lane_sum(xs, xs, |v, _| (v - m) * (v - m));
        }
        mean[c] = m;
        var[c] = acc2 / count as f64;
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = vec![0.0; x.len()];
    let mut out = vec![0.0; x.len()];
    for b in 0..s.n {
        for c in 0..s.c {
            let off = (b * s.c + c) * hw;
            let (m, is, ga, be) = (mean[c], inv_std[c], gamma.data()[c], beta.data()[c]);
            for i in off..off + hw {
                let xh = (x[i] - m) * is;
                xhat[i] = xh;
                out[i] = ga * xh + be;
            }
        }
    }
    Ok(BnTrainOut {
        output: Tensor::from_vec(s, out)?,
        xhat,
        inv_std,
        stats: BatchStats { mean, var, count },
    })
}

pub(crate) fn batchnorm_eval(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
    running_mean: &[f64],
    running_var: &[f64],
) -> Result<(Tensor, Vec<f64>)> {
    check_bn(input, gamma, beta, eps)?;
    let s = input.shape();
    if running_mean.len() != s.c || running_var.len() != s.c {
        return Err(Error::shape("batchnorm2d", "running statistics do not match channel count"));
    }
    let hw = s.plane();
    let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut out = vec![0.0; input.numel()];
    for b in 0..s.n {
        for c in 0..s.c {
            let off = (b * s.c + c) * hw;
            let scale = gamma.data()[c] * inv_std[c];
            let shift = beta.data()[c] - running_mean[c] * scale;
            for i in off..off + hw {
                out[i] = input.data()[i] * scale + shift;
            }
        }
    }
    Ok((Tensor::from_vec(s, out)?, inv_std))
}

pub(crate) fn batchnorm_backward(
    shape: Shape,
    grad_out: &[f64],
    gamma: &[f64],
    xhat: &[f64],
    inv_std: &[f64],
    train: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let hw = shape.plane();
    let count = (shape.n * hw) as f64;
    let mut dgamma = vec![0.0; shape.c];
    let mut dbeta = vec![0.0; shape.c];
    for b in 0..shape.n {
        for c in 0..shape.c {
            let off = (b * shape.c + c) * hw;
            let (gs, xs) = (&grad_out[off..off + hw], &xhat[off..off + hw]);
            dgamma[c] += lane_sum(gs, xs, |g, x| g * x);
            dbeta[c] += lane_sum(gs, gs, |g, _| g);
        }
    }
    let mut dx = vec![0.0; grad_out.len()];
    for b in 0..shape.n {
        for c in 0..shape.c {
            let off = (b * shape.c + c) * hw;
            let g = gamma[c];
            if train {
                // dxhat = dy * gamma; sums over the channel reduce to dbeta/dgamma
                let k = g * inv_std[c] / count;
                for i in off..off + hw {
                    dx[i] = k * (count * grad_out[i] - dbeta[c] - xhat[i] * dgamma[c]);
                }
            } else {
                let k = g * inv_std[c];
                for i in off..off + hw {
                    dx[i] = k * grad_out[i];
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Max pooling without padding. Returns the pooled tensor and the flat input
/// index of each output's maximum (first maximum in scan order on ties).
pub fn maxpool2d(input: &Tensor, k: usize, stride: usize) -> Result<(Tensor, Vec<usize>)> {
    if k == 0 || stride == 0 {
        return Err(Error::invalid("maxpool2d", format!("k = {k}, stride = {stride} must be >= 1")));
    }
    let s = input.shape();
    let (oh, ow) = match (out_dim(s.h, k, stride, 0), out_dim(s.w, k, stride, 0)) {
        (Some(oh), Some(ow)) => (oh, ow),
        _ => {
            return Err(Error::shape(
                "maxpool2d",
                format!("window {k} larger than input {}x{}", s.h, s.w),
            ))
        }
    };
    let out_shape = Shape::new(s.n, s.c, oh, ow);
    let mut out = vec![0.0; out_shape.numel()];
    let mut arg = vec![0usize; out_shape.numel()];
    let x = input.data();
    for plane in 0..s.n * s.c {
        let base = plane * s.plane();
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = base + oy * stride * s.w + ox * stride;
                for ky in 0..k {
                    for kx in 0..k {
                        let i = base + (oy * stride + ky) * s.w + ox * stride + kx;
                        if x[i] > best {
                            best = x[i];
                            best_i = i;
                        }
                    }
                }
                let o = (plane * oh + oy) * ow + ox;
                out[o] = best;
                arg[o] = best_i;
            }
        }
    }
    Ok((Tensor::from_vec(out_shape, out)?, arg))
}

pub fn upsample_nearest2x(input: &Tensor) -> Tensor {
    let s = input.shape();
    let out_shape = Shape::new(s.n, s.c, s.h * 2, s.w * 2);
    let mut out = vec![0.0; out_shape.numel()];
    for plane in 0..s.n * s.c {
        for y in 0..s.h * 2 {
            for x in 0..s.w * 2 {
                out[(plane * s.h * 2 + y) * s.w * 2 + x] = input.data()[(plane * s.h + y / 2) * s.w + x / 2];
            }
        }
    }
    Tensor::from_vec(out_shape, out).expect("upsample shape")
}

pub(crate) fn upsample_nearest2x_backward(grad_out: &Tensor, input_shape: Shape) -> Tensor {
    let s = input_shape;
    let mut dx = vec![0.0; s.numel()];
    for plane in 0..s.n * s.c {
        for y in 0..s.h * 2 {
            for x in 0..s.w * 2 {
                dx[(plane * s.h + y / 2) * s.w + x / 2] += grad_out.data()[(plane * s.h * 2 + y) * s.w * 2 + x];
            }
        }
    }
    Tensor::from_vec(s, dx).expect("upsample shape")
}

/// Stacks tensors along the channel axis in argument order.
pub fn concat_channels(inputs: &[&Tensor]) -> Result<Tensor> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::invalid("concat_channels", "no inputs"))?
        .shape();
    let mut c_total = 0;
    for t in inputs {
        let s = t.shape();
        if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
            return Err(Error::shape(
                "concat_channels",
                format!("input {} does not share (n, h, w) with {}", s, first),
            ));
        }
        c_total += s.c;
    }
    let out_shape = Shape::new(first.n, c_total, first.h, first.w);
    let mut out = Vec::with_capacity(out_shape.numel());
    let hw = first.plane();
    for b in 0..first.n {
        for t in inputs {
            let c = t.shape().c;
            out.extend_from_slice(&t.data()[b * c * hw..(b + 1) * c * hw]);
        }
    }
    Tensor::from_vec(out_shape, out)
}

pub(crate) fn concat_backward(grad_out: &Tensor, channels: &[usize]) -> Vec<Tensor> {
    let s = grad_out.shape();
    let hw = s.plane();
    let mut outs: Vec<Vec<f64>> = channels.iter().map(|c| Vec::with_capacity(s.n * c * hw)).collect();
    for b in 0..s.n {
        let mut c0 = 0;
        for (i, &c) in channels.iter().enumerate() {
            let start = (b * s.c + c0) * hw;
            outs[i].extend_from_slice(&grad_out.data()[start..start + c * hw]);
            c0 += c;
        }
    }
    outs.into_iter()
        .zip(channels)
        .map(|(d, &c)| Tensor::from_vec(Shape::new(s.n, c, s.h, s.w), d).expect("concat shape"))
        .collect()
}

#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Branch-free `exp` with the argument clamped to `[-700, 700]`, written so
/// the element loops below vectorize. Relative error stays within a few ulp.
#[inline(always)]
fn exp_clamped(x: f64) -> f64 {
    const ROUND: f64 = 6755399441055744.0;
    const LN2_HI: f64 = 6.93147180369123816490e-01;
    const LN2_LO: f64 = 1.90821492927058770002e-10;
    let x = x.clamp(-700.0, 700.0);
    let t = x * std::f64::consts::LOG2_E + ROUND;
    let n = t - ROUND;
    let r = x - n * LN2_HI - n * LN2_LO;
    const C: [f64; 14] = [
        1.0,
        1.0,
        0.5,
        1.0 / 6.0,
        1.0 / 24.0,
        1.0 / 120.0,
        1.0 / 720.0,
        1.0 / 5040.0,
        1.0 / 40320.0,
        1.0 / 362880.0,
        1.0 / 3628800.0,
        1.0 / 39916800.0,
        1.0 / 479001600.0,
        1.0 / 6227020800.0,
    ];
    // Estrin evaluation of the degree-13 Taylor polynomial on |r| <= ln2 / 2.
    let r2 = r * r;
    let r4 = r2 * r2;
    let r8 = r4 * r4;
    let q0 = C[0] + C[1] * r + (C[2] + C[3] * r) * r2;
    let q1 = C[4] + C[5] * r + (C[6] + C[7] * r) * r2;
    let q2 = C[8] + C[9] * r + (C[10] + C[11] * r) * r2;
    let q3 = C[12] + C[13] * r;
    let p = q0 + q1 * r4 + (q2 + q3 * r4) * r8;
    p * f64::from_bits(t.to_bits().wrapping_add(1023) << 52)
}

#[inline(always)]
fn sigmoid_fast(x: f64) -> f64 {
    1.0 / (1.0 + exp_clamped(-x))
}

pub fn sigmoid(input: &Tensor) -> Tensor {
    map(input, sigmoid_fast)
}

pub fn silu(input: &Tensor) -> Tensor {
    map(input, |x| x * sigmoid_fast(x))
}

/// SiLU output together with the sigmoid of the input, kept for the backward pass.
pub(crate) fn silu_with_sigmoid(input: &Tensor) -> (Tensor, Tensor) {
    let sig = map(input, sigmoid_fast);
    let out = zip_map(input, &sig, "silu", |x, s| x * s).expect("same shape");
    (out, sig)
}

pub(crate) fn map(input: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let data = input.data().iter().map(|&v| f(v)).collect();
    Tensor::from_vec(input.shape(), data).expect("map preserves shape")
}

/// Source channel of output channel `o` for a groups-`g` shuffle of `c` channels.
#[inline]
fn shuffle_source(o: usize, c: usize, groups: usize) -> usize {
    let per = c / groups;
    (o % groups) * per + o / groups
}

/// Reorders channels by transposing the `(groups, c / groups)` channel grid.
pub fn channel_shuffle(input: &Tensor, groups: usize) -> Result<Tensor> {
    let s = input.shape();
    if groups == 0 || s.c % groups != 0 {
        return Err(Error::invalid(
            "channel_shuffle",
            format!("{} channels not divisible into {groups} groups", s.c),
        ));
    }
    let hw = s.plane();
    let mut out = vec![0.0; s.numel()];
    for b in 0..s.n {
        for o in 0..s.c {
            let src = shuffle_source(o, s.c, groups);
            let dst_off = (b * s.c + o) * hw;
            let src_off = (b * s.c + src) * hw;
            out[dst_off..dst_off + hw].copy_from_slice(&input.data()[src_off..src_off + hw]);
        }
    }
    Tensor::from_vec(s, out)
}

/// Inverse of [`channel_shuffle`] with the same `groups`.
pub fn channel_unshuffle(input: &Tensor, groups: usize) -> Result<Tensor> {
    let s = input.shape();
    if groups == 0 || s.c % groups != 0 {
        return Err(Error::invalid(
            "channel_shuffle",
            format!("{} channels not divisible into {groups} groups", s.c),
        ));
    }
    let hw = s.plane();
    let mut out = vec![0.0; s.numel()];
    for b in 0..s.n {
        for o in 0..s.c {
            let src = shuffle_source(o, s.c, groups);
            let dst_off = (b * s.c + src) * hw;
            let src_off = (b * s.c + o) * hw;
            out[dst_off..dst_off + hw].copy_from_slice(&input.data()[src_off..src_off + hw]);
        }
    }
    Tensor::from_vec(s, out)
}

/// Element-wise map over three same-shaped tensors.
pub(crate) fn zip3_map(a: &Tensor, b: &Tensor, c: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .zip(c.data())
        .map(|((&x, &y), &z)| f(x, y, z))
        .collect();
    Tensor::from_vec(a.shape(), data).expect("zip3_map preserves shape")
}

pub(crate) fn zip_map(a: &Tensor, b: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{} vs {}", a.shape(), b.shape())));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.shape(), data)
}
