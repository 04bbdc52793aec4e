//! Forward operators and their vector-Jacobian products.
//!
//! Every function here is pure. The autograd tape in [`crate::autograd`]
//! records which of these ran and replays the backward halves in reverse.

use crate::error::{Error, Result};
use crate::scalar::{gemm, Scalar};
use crate::tensor::Tensor;

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct ConvParams<T> {
    /// `(C_out, C_in, kH, kW)`.
    pub weight: Tensor<T>,
    pub bias: Option<Vec<T>>,
    pub stride: usize,
    pub padding: (usize, usize),
}

#[derive(Debug, Clone)]
pub struct BnParams<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub epsilon: f64,
    pub momentum: f64,
}

impl<T: Scalar> BnParams<T> {
    pub fn identity(channels: usize) -> Self {
        BnParams {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            epsilon: BN_EPSILON,
            momentum: BN_MOMENTUM,
        }
    }
}

/// Output extent of a strided, padded window along one axis.
pub fn window_out(len: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    if kernel == 0 || stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    ph: usize,
    pw: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new<T: Scalar>(
        x: &Tensor<T>,
        weight: &Tensor<T>,
        stride: usize,
        padding: (usize, usize),
    ) -> Result<Self> {
        let [_, c_in, h, w] = x.shape();
        let [c_out, wc_in, kh, kw] = weight.shape();
        if c_in != wc_in {
            return Err(Error::shape(
                "conv2d",
                format!("input channels {c_in} != weight input channels {wc_in}"),
            ));
        }
        if kh == 0 || kw == 0 {
            return Err(Error::shape("conv2d", "kernel height and width must be >= 1"));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be positive"));
        }
        let ho = window_out(h, kh, stride, padding.0).ok_or_else(|| {
            Error::shape(
                "conv2d",
                format!("height {h} with padding {} is smaller than kernel height {kh}", padding.0),
            )
        })?;
        let wo = window_out(w, kw, stride, padding.1).ok_or_else(|| {
            Error::shape(
                "conv2d",
                format!("width {w} with padding {} is smaller than kernel width {kw}", padding.1),
            )
        })?;
        Ok(ConvGeom {
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            ph: padding.0,
            pw: padding.1,
            ho,
            wo,
        })
    }

    fn k(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn l(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.ph == 0 && self.pw == 0
    }

    fn im2col<T: Scalar>(&self, x: &[T], col: &mut [T]) {
        let (ho, wo) = (self.ho, self.wo);
        for ci in 0..self.c_in {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    let dst = &mut col[row * ho * wo..(row + 1) * ho * wo];
                    for oh in 0..ho {
                        let drow = &mut dst[oh * wo..(oh + 1) * wo];
                        let ih = (oh * self.stride + ki) as isize - self.ph as isize;
                        if ih < 0 || ih >= self.h as isize {
                            drow.fill(T::zero());
                            continue;
                        }
                        let src = &plane[ih as usize * self.w..(ih as usize + 1) * self.w];
                        for (ow, d) in drow.iter_mut().enumerate() {
                            let iw = (ow * self.stride + kj) as isize - self.pw as isize;
                            *d = if iw >= 0 && iw < self.w as isize {
                                src[iw as usize]
                            } else {
                                T::zero()
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, col: &[T], dx: &mut [T]) {
        let (ho, wo) = (self.ho, self.wo);
        for ci in 0..self.c_in {
            let plane = &mut dx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    let src = &col[row * ho * wo..(row + 1) * ho * wo];
                    for oh in 0..ho {
                        let ih = (oh * self.stride + ki) as isize - self.ph as isize;
                        if ih < 0 || ih >= self.h as isize {
                            continue;
                        }
                        let drow = &mut plane[ih as usize * self.w..(ih as usize + 1) * self.w];
                        for ow in 0..wo {
                            let iw = (ow * self.stride + kj) as isize - self.pw as isize;
                            if iw >= 0 && iw < self.w as isize {
                                drow[iw as usize] += src[oh * wo + ow];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d<T: Scalar>(input: &Tensor<T>, params: &ConvParams<T>) -> Result<Tensor<T>> {
    conv2d_forward(
        input,
        &params.weight,
        params.bias.as_deref(),
        params.stride,
        params.padding,
    )
}

pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&[T]>,
    stride: usize,
    padding: (usize, usize),
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(x, weight, stride, padding)?;
    if let Some(b) = bias {
        if b.len() != g.c_out {
            return Err(Error::shape(
                "conv2d",
                format!("bias length {} != output channels {}", b.len(), g.c_out),
            ));
        }
    }
    let n = x.n();
    let (k, l) = (g.k(), g.l());
    let mut out = Tensor::zeros([n, g.c_out, g.ho, g.wo]);
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * l] };
    for ni in 0..n {
        let xi = x.item(ni);
        let cols: &[T] = if g.is_pointwise() {
            xi
        } else {
            g.im2col(xi, &mut col);
            &col
        };
        let oi = out.item_mut(ni);
        gemm(false, false, g.c_out, l, k, weight.data(), cols, T::zero(), oi);
        if let Some(b) = bias {
            for (co, &bv) in b.iter().enumerate() {
                for v in &mut oi[co * l..(co + 1) * l] {
                    *v += bv;
                }
            }
        }
    }
    Ok(out)
}

pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
}

pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    padding: (usize, usize),
    dy: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let g = ConvGeom::new(x, weight, stride, padding)?;
    if dy.shape() != [x.n(), g.c_out, g.ho, g.wo] {
        return Err(Error::shape(
            "conv2d_backward",
            format!("upstream gradient shape {:?}", dy.shape()),
        ));
    }
    let (k, l) = (g.k(), g.l());
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(weight.shape());
    let mut db = vec![T::zero(); g.c_out];
    let mut col = vec![T::zero(); if g.is_pointwise() { 0 } else { k * l }];
    let mut dcol = vec![T::zero(); if g.is_pointwise() { 0 } else { k * l }];
    for ni in 0..x.n() {
        let dyi = dy.item(ni);
        for (co, b) in db.iter_mut().enumerate() {
            *b += dyi[co * l..(co + 1) * l].iter().copied().sum::<T>();
        }
        if g.is_pointwise() {
            gemm(false, true, g.c_out, k, l, dyi, x.item(ni), T::one(), dw.data_mut());
            gemm(true, false, k, l, g.c_out, weight.data(), dyi, T::zero(), dx.item_mut(ni));
        } else {
            g.im2col(x.item(ni), &mut col);
            gemm(false, true, g.c_out, k, l, dyi, &col, T::one(), dw.data_mut());
            gemm(true, false, k, l, g.c_out, weight.data(), dyi, T::zero(), &mut dcol);
            g.col2im(&dcol, dx.item_mut(ni));
        }
    }
    Ok(ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    })
}

/// Per-channel statistics of a training-mode batch-norm pass.
#[derive(Debug, Clone)]
pub struct BnBatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance.
    pub var: Vec<f64>,
    pub count: usize,
}

impl BnBatchStats {
    pub fn inv_std(&self, eps: f64) -> Vec<f64> {
        self.var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect()
    }
}

fn check_bn_lengths<T: Scalar>(x: &Tensor<T>, gamma: &[T], beta: &[T]) -> Result<()> {
    if gamma.len() != x.c() || beta.len() != x.c() {
        return Err(Error::shape(
            "batch_norm",
            format!(
                "input has {} channels but gamma/beta have {}/{}",
                x.c(),
                gamma.len(),
                beta.len()
            ),
        ));
    }
    Ok(())
}

pub fn batch_stats<T: Scalar>(x: &Tensor<T>) -> BnBatchStats {
    let [n, c, h, w] = x.shape();
    let hw = h * w;
    let count = n * hw;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ci in 0..c {
        let mut s = 0.0;
        for ni in 0..n {
            let o = x.offset(ni, ci, 0, 0);
            s += x.data()[o..o + hw].iter().map(|v| v.as_f64()).sum::<f64>();
        }
        let m = s / count as f64;
        let mut s2 = 0.0;
        for ni in 0..n {
            let o = x.offset(ni, ci, 0, 0);
            s2 += x.data()[o..o + hw]
                .iter()
                .map(|v| (v.as_f64() - m).powi(2))
                .sum::<f64>();
        }
        mean[ci] = m;
        var[ci] = s2 / count as f64;
    }
    BnBatchStats { mean, var, count }
}

/// Affine per-channel normalization `y = gamma·(x − mean)·inv_std + beta`.
pub fn bn_apply<T: Scalar>(
    x: &Tensor<T>,
    mean: &[f64],
    inv_std: &[f64],
    gamma: &[T],
    beta: &[T],
) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let hw = h * w;
    let mut out = Tensor::zeros(x.shape());
    for ni in 0..n {
        for ci in 0..c {
            let scale = gamma[ci].as_f64() * inv_std[ci];
            let shift = beta[ci].as_f64() - mean[ci] * scale;
            let (s, b) = (T::of(scale), T::of(shift));
            let o = x.offset(ni, ci, 0, 0);
            for (dst, &src) in out.data_mut()[o..o + hw].iter_mut().zip(&x.data()[o..o + hw]) {
                *dst = src * s + b;
            }
        }
    }
    out
}

pub fn bn_forward_train<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    eps: f64,
) -> Result<(Tensor<T>, BnBatchStats)> {
    check_bn_lengths(x, gamma, beta)?;
    let stats = batch_stats(x);
    let y = bn_apply(x, &stats.mean, &stats.inv_std(eps), gamma, beta);
    Ok((y, stats))
}

pub fn bn_forward_eval<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
    eps: f64,
) -> Result<Tensor<T>> {
    check_bn_lengths(x, gamma, beta)?;
    if running_mean.len() != x.c() || running_var.len() != x.c() {
        return Err(Error::shape("batch_norm", "running statistics length"));
    }
    if let Some(i) = running_var.iter().position(|v| *v < T::zero()) {
        return Err(Error::invalid(format!(
            "batch_norm running_var[{i}] is negative"
        )));
    }
    let mean: Vec<f64> = running_mean.iter().map(|v| v.as_f64()).collect();
    let inv: Vec<f64> = running_var
        .iter()
        .map(|v| 1.0 / (v.as_f64() + eps).sqrt())
        .collect();
    Ok(bn_apply(x, &mean, &inv, gamma, beta))
}

/// Exponential moving average update of running statistics. The running
/// variance tracks the unbiased batch variance.
pub fn bn_update_running<T: Scalar>(
    running_mean: &mut [T],
    running_var: &mut [T],
    stats: &BnBatchStats,
    momentum: f64,
) {
    let correction = if stats.count > 1 {
        stats.count as f64 / (stats.count - 1) as f64
    } else {
        1.0
    };
    for ci in 0..running_mean.len() {
        let rm = running_mean[ci].as_f64();
        let rv = running_var[ci].as_f64();
        running_mean[ci] = T::of((1.0 - momentum) * rm + momentum * stats.mean[ci]);
        running_var[ci] = T::of((1.0 - momentum) * rv + momentum * stats.var[ci] * correction);
    }
}

/// Batch normalization. Training mode normalizes with batch moments and
/// folds them into the running statistics.
pub fn batch_norm<T: Scalar>(
    input: &Tensor<T>,
    params: &mut BnParams<T>,
    training: bool,
) -> Result<Tensor<T>> {
    if let Some(i) = params.running_var.iter().position(|v| *v < T::zero()) {
        return Err(Error::invalid(format!(
            "batch_norm running_var[{i}] is negative"
        )));
    }
    if training {
        let (y, stats) = bn_forward_train(input, &params.gamma, &params.beta, params.epsilon)?;
        bn_update_running(
            &mut params.running_mean,
            &mut params.running_var,
            &stats,
            params.momentum,
        );
        Ok(y)
    } else {
        bn_forward_eval(
            input,
            &params.gamma,
            &params.beta,
            &params.running_mean,
            &params.running_var,
            params.epsilon,
        )
    }
}

pub struct BnGrads<T> {
    pub input: Tensor<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

/// Backward pass of batch norm. With `batch_moments` the statistics are
/// treated as functions of the input (training mode); otherwise they are
/// constants (inference mode).
pub fn bn_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    mean: &[f64],
    inv_std: &[f64],
    batch_moments: bool,
    dy: &Tensor<T>,
) -> BnGrads<T> {
    let [n, c, h, w] = x.shape();
    let hw = h * w;
    let m = (n * hw) as f64;
    let mut dx = Tensor::zeros(x.shape());
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ci in 0..c {
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for ni in 0..n {
            let o = x.offset(ni, ci, 0, 0);
            for (xv, dv) in x.data()[o..o + hw].iter().zip(&dy.data()[o..o + hw]) {
                let xhat = (xv.as_f64() - mean[ci]) * inv_std[ci];
                sum_dy += dv.as_f64();
                sum_dy_xhat += dv.as_f64() * xhat;
            }
        }
        dgamma[ci] = T::of(sum_dy_xhat);
        dbeta[ci] = T::of(sum_dy);
        let g = gamma[ci].as_f64();
        for ni in 0..n {
            let o = x.offset(ni, ci, 0, 0);
            for i in o..o + hw {
                let d = dy.data()[i].as_f64();
                let v = if batch_moments {
                    let xhat = (x.data()[i].as_f64() - mean[ci]) * inv_std[ci];
                    g * inv_std[ci] / m * (m * d - sum_dy - xhat * sum_dy_xhat)
                } else {
                    g * inv_std[ci] * d
                };
                dx.data_mut()[i] = T::of(v);
            }
        }
    }
    BnGrads {
        input: dx,
        gamma: dgamma,
        beta: dbeta,
    }
}

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Scalar>(input: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = dy.clone();
    for (d, &x) in dx.data_mut().iter_mut().zip(input.data()) {
        if x <= T::zero() {
            *d = T::zero();
        }
    }
    dx
}

/// Window maximum; also returns the flat input index of each selected
/// element (first occurrence on ties).
pub fn max_pool2d_with_indices<T: Scalar>(
    input: &Tensor<T>,
    kernel: usize,
    stride: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let [n, c, h, w] = input.shape();
    if kernel == 0 || stride == 0 {
        return Err(Error::invalid("max_pool2d kernel and stride must be positive"));
    }
    let ho = window_out(h, kernel, stride, 0).ok_or_else(|| {
        Error::shape("max_pool2d", format!("kernel {kernel} larger than input {h}x{w}"))
    })?;
    let wo = window_out(w, kernel, stride, 0).ok_or_else(|| {
        Error::shape("max_pool2d", format!("kernel {kernel} larger than input {h}x{w}"))
    })?;
    let mut out = Tensor::zeros([n, c, ho, wo]);
    let mut idx = Vec::with_capacity(n * c * ho * wo);
    let data = input.data();
    let mut k = 0;
    for ni in 0..n {
        for ci in 0..c {
            let base = input.offset(ni, ci, 0, 0);
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut best = base + oh * stride * w + ow * stride;
                    for ki in 0..kernel {
                        for kj in 0..kernel {
                            let i = base + (oh * stride + ki) * w + ow * stride + kj;
                            if data[i] > data[best] {
                                best = i;
                            }
                        }
                    }
                    out.data_mut()[k] = data[best];
                    idx.push(best);
                    k += 1;
                }
            }
        }
    }
    Ok((out, idx))
}

pub fn max_pool2d<T: Scalar>(input: &Tensor<T>, kernel: usize, stride: usize) -> Result<Tensor<T>> {
    max_pool2d_with_indices(input, kernel, stride).map(|(t, _)| t)
}

pub fn max_pool2d_backward<T: Scalar>(
    input_shape: [usize; 4],
    indices: &[usize],
    dy: &Tensor<T>,
) -> Tensor<T> {
    let mut dx = Tensor::zeros(input_shape);
    for (&i, &d) in indices.iter().zip(dy.data()) {
        dx.data_mut()[i] += d;
    }
    dx
}

pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let [na, ca, ha, wa] = a.shape();
    let [nb, cb, hb, wb] = b.shape();
    if na != nb {
        return Err(Error::shape("concat_channels", format!("batch {na} vs {nb}")));
    }
    if ha != hb || wa != wb {
        return Err(Error::shape(
            "concat_channels",
            format!("spatial {ha}x{wa} vs {hb}x{wb}"),
        ));
    }
    let mut data = Vec::with_capacity(a.numel() + b.numel());
    for ni in 0..na {
        data.extend_from_slice(a.item(ni));
        data.extend_from_slice(b.item(ni));
    }
    Tensor::new([na, ca + cb, ha, wa], data)
}

pub fn concat_backward<T: Scalar>(
    ca: usize,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let [n, c, h, w] = dy.shape();
    let cb = c - ca;
    let mut da = Vec::with_capacity(n * ca * h * w);
    let mut db = Vec::with_capacity(n * cb * h * w);
    for ni in 0..n {
        let item = dy.item(ni);
        da.extend_from_slice(&item[..ca * h * w]);
        db.extend_from_slice(&item[ca * h * w..]);
    }
    (
        Tensor::new([n, ca, h, w], da).expect("split a"),
        Tensor::new([n, cb, h, w], db).expect("split b"),
    )
}

fn upsample_factors(h: usize, w: usize, th: usize, tw: usize) -> Result<(usize, usize)> {
    if h == 0 || w == 0 || th < h || tw < w || th % h != 0 || tw % w != 0 {
        return Err(Error::shape(
            "upsample_nearest",
            format!("cannot upsample {h}x{w} to {th}x{tw} by an integer factor"),
        ));
    }
    Ok((th / h, tw / w))
}

pub fn upsample_nearest<T: Scalar>(
    input: &Tensor<T>,
    target_h: usize,
    target_w: usize,
) -> Result<Tensor<T>> {
    let [n, c, h, w] = input.shape();
    let (fh, fw) = upsample_factors(h, w, target_h, target_w)?;
    Ok(Tensor::from_fn([n, c, target_h, target_w], |ni, ci, y, x| {
        input.at(ni, ci, y / fh, x / fw)
    }))
}

pub fn upsample_nearest_backward<T: Scalar>(
    input_shape: [usize; 4],
    dy: &Tensor<T>,
) -> Result<Tensor<T>> {
    let [n, c, h, w] = input_shape;
    let (fh, fw) = upsample_factors(h, w, dy.h(), dy.w())?;
    let mut dx = Tensor::zeros(input_shape);
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..dy.h() {
                for x in 0..dy.w() {
                    let o = dx.offset(ni, ci, y / fh, x / fw);
                    dx.data_mut()[o] += dy.at(ni, ci, y, x);
                }
            }
        }
    }
    Ok(dx)
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "add",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let mut out = a.clone();
    out.add_assign(b);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: [usize; 4], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-1.0..1.0))
    }

    /// Direct summation over the kernel window.
    fn conv_direct(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: (usize, usize)) -> Tensor<f64> {
        let [n, _, h, wd] = x.shape();
        let [co, ci, kh, kw] = w.shape();
        let ho = (h + 2 * pad.0 - kh) / stride + 1;
        let wo = (wd + 2 * pad.1 - kw) / stride + 1;
        Tensor::from_fn([n, co, ho, wo], |b, o, y, xx| {
            let mut s = 0.0;
            for c in 0..ci {
                for i in 0..kh {
                    for j in 0..kw {
                        let iy = (y * stride + i) as isize - pad.0 as isize;
                        let ix = (xx * stride + j) as isize - pad.1 as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                            s += x.at(b, c, iy as usize, ix as usize) * w.at(o, c, i, j);
                        }
                    }
                }
            }
            s
        })
    }

    #[test]
    fn identity_pointwise_kernel() {
        let x = Tensor::<f32>::full([1, 1, 3, 3], 1.0);
        let p = ConvParams {
            weight: Tensor::full([1, 1, 1, 1], 1.0),
            bias: Some(vec![0.0]),
            stride: 1,
            padding: (0, 0),
        };
        let y = conv2d(&x, &p).unwrap();
        assert_eq!(y.shape(), [1, 1, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn ones_kernel_sums_window() {
        let x = Tensor::<f32>::full([1, 1, 5, 5], 1.0);
        let w = Tensor::full([1, 1, 3, 3], 1.0);
        let y = conv2d_forward(&x, &w, Some(&[0.0]), 1, (0, 0)).unwrap();
        let oracle = conv_direct(&x.cast(), &w.cast(), 1, (0, 0));
        assert_eq!(y.shape(), [1, 1, 3, 3]);
        assert!(oracle.data().iter().all(|&v| v == 9.0));
        assert!(y.data().iter().all(|&v| v == 9.0));
    }

    #[test]
    fn factorized_pair_keeps_spatial_shape() {
        let x = Tensor::<f32>::full([1, 1, 16, 16], 0.5);
        let a = conv2d_forward(&x, &Tensor::full([1, 1, 1, 7], 0.1), None, 1, (0, 3)).unwrap();
        let b = conv2d_forward(&a, &Tensor::full([1, 1, 7, 1], 0.1), None, 1, (3, 0)).unwrap();
        assert_eq!(b.shape(), [1, 1, 16, 16]);
    }

    #[test]
    fn im2col_conv_matches_direct_summation() {
        for (stride, pad, k) in [(1, (1, 1), (3, 3)), (2, (1, 0), (3, 2)), (1, (0, 3), (1, 7)), (1, (0, 0), (1, 1))] {
            let x = random([2, 3, 9, 8], 7);
            let w = random([4, 3, k.0, k.1], 8);
            let y = conv2d_forward(&x, &w, None, stride, pad).unwrap();
            let o = conv_direct(&x, &w, stride, pad);
            assert_eq!(y.shape(), o.shape());
            assert!(y.max_abs_diff(&o) < 1e-12);
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch_naming_dimension() {
        let x = Tensor::<f32>::zeros([1, 2, 4, 4]);
        let w = Tensor::zeros([1, 3, 1, 1]);
        let err = conv2d_forward(&x, &w, None, 1, (0, 0)).unwrap_err();
        assert!(err.to_string().contains("channels"), "{err}");
        let w = Tensor::zeros([1, 2, 5, 1]);
        let err = conv2d_forward(&x, &w, None, 1, (0, 0)).unwrap_err();
        assert!(err.to_string().contains("height"), "{err}");
    }

    #[test]
    fn conv_is_linear_without_bias() {
        let x = random([1, 2, 6, 6], 1);
        let y = random([1, 2, 6, 6], 2);
        let w = random([3, 2, 3, 3], 3);
        let (alpha, beta) = (0.7, -1.3);
        let mut mix = x.map(|v| v * alpha);
        mix.add_assign(&y.map(|v| v * beta));
        let lhs = conv2d_forward(&mix, &w, None, 1, (1, 1)).unwrap();
        let mut rhs = conv2d_forward(&x, &w, None, 1, (1, 1)).unwrap().map(|v| v * alpha);
        rhs.add_assign(&conv2d_forward(&y, &w, None, 1, (1, 1)).unwrap().map(|v| v * beta));
        assert!(lhs.max_abs_diff(&rhs) < 1e-5);
    }

    #[test]
    fn bn_identity_parameters_pass_through() {
        let x = random([2, 3, 4, 4], 4);
        let mut p = BnParams::<f64>::identity(3);
        p.epsilon = 0.0;
        let y = batch_norm(&x, &mut p, false).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-12);
        // idempotent as an affine map
        let yy = batch_norm(&y, &mut p, false).unwrap();
        assert!(yy.max_abs_diff(&y) < 1e-12);
    }

    #[test]
    fn bn_constant_channel_trains_to_beta() {
        let x = Tensor::<f64>::full([2, 1, 3, 3], 4.0);
        let mut p = BnParams::identity(1);
        p.beta = vec![0.25];
        let y = batch_norm(&x, &mut p, true).unwrap();
        assert!(y.data().iter().all(|v| (v - 0.25).abs() < 1e-9));
        assert!((p.running_mean[0] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn bn_training_output_has_unit_moments() {
        let x = random([2, 4, 3, 3], 5).map(|v| 3.0 * v + 2.0);
        let mut p = BnParams::identity(4);
        let y = batch_norm(&x, &mut p, true).unwrap();
        // recompute moments from the output directly
        for c in 0..4 {
            let vals: Vec<f64> = (0..2)
                .flat_map(|n| (0..9).map(move |i| (n, i)))
                .map(|(n, i)| y.at(n, c, i / 3, i % 3))
                .collect();
            let mean = vals.iter().sum::<f64>() / 18.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 18.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn bn_rejects_negative_running_var() {
        let x = Tensor::<f32>::zeros([1, 1, 2, 2]);
        let mut p = BnParams::identity(1);
        p.running_var = vec![-1.0];
        assert!(batch_norm(&x, &mut p, false).is_err());
    }

    #[test]
    fn relu_cases() {
        let x = Tensor::<f32>::new([1, 1, 1, 3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let neg = Tensor::<f32>::full([1, 2, 2, 2], -3.0);
        assert!(relu(&neg).data().iter().all(|&v| v == 0.0));
        let pos = random([1, 2, 2, 2], 9).map(|v| v.abs() + 0.1);
        assert_eq!(relu(&pos), pos);
    }

    #[test]
    fn max_pool_row_index_input() {
        let x = Tensor::<f32>::from_fn([1, 1, 4, 4], |_, _, h, _| h as f32);
        let y = max_pool2d(&x, 2, 2).unwrap();
        // window-max oracle
        let oracle: Vec<f32> = (0..2)
            .flat_map(|i| (0..2).map(move |j| (i, j)))
            .map(|(i, j)| {
                let mut m = f32::MIN;
                for a in 0..2 {
                    for b in 0..2 {
                        m = m.max(x.at(0, 0, 2 * i + a, 2 * j + b));
                    }
                }
                m
            })
            .collect();
        assert_eq!(y.data(), oracle.as_slice());
        assert_eq!(y.data(), &[1.0, 1.0, 3.0, 3.0]);
    }

    #[test]
    fn max_pool_degenerate_cases() {
        let c = Tensor::<f32>::full([1, 2, 6, 6], 0.3);
        assert!(max_pool2d(&c, 2, 2).unwrap().data().iter().all(|&v| v == 0.3));
        let x = random([1, 2, 5, 5], 3);
        assert_eq!(max_pool2d(&x, 1, 1).unwrap(), x);
        assert!(max_pool2d(&x, 6, 1).is_err());
    }

    #[test]
    fn concat_layout() {
        let a = random([1, 2, 4, 4], 1);
        let b = random([1, 3, 4, 4], 2);
        let y = concat_channels(&a, &b).unwrap();
        assert_eq!(y.shape(), [1, 5, 4, 4]);
        for c in 0..2 {
            for i in 0..16 {
                assert_eq!(y.at(0, c, i / 4, i % 4).to_bits(), a.at(0, c, i / 4, i % 4).to_bits());
            }
        }
        let empty = Tensor::<f64>::zeros([1, 0, 4, 4]);
        assert_eq!(concat_channels(&a, &empty).unwrap(), a);
        assert!(concat_channels(&a, &random([1, 1, 2, 4], 3)).is_err());
    }

    #[test]
    fn upsample_index_mapping() {
        let x = Tensor::<f32>::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = upsample_nearest(&x, 4, 4).unwrap();
        // index-mapping oracle: output (i, j) reads source (i * 2 / 4, j * 2 / 4)
        let oracle: Vec<f32> = (0..16)
            .map(|k| x.at(0, 0, (k / 4) * 2 / 4, (k % 4) * 2 / 4))
            .collect();
        assert_eq!(y.data(), oracle.as_slice());
        assert_eq!(
            y.data(),
            &[1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]
        );
        assert_eq!(upsample_nearest(&x, 2, 2).unwrap(), x);
        assert!(upsample_nearest(&x, 3, 4).is_err());
        assert!(upsample_nearest(&x, 1, 2).is_err());
    }
}
