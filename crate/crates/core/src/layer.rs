//! Network layers with cached forward state and analytic backward passes.
//!
//! Tensors are NCHW for spatial layers and [N, D] for dense/softmax. Train
//! mode caches whatever backward needs; eval mode is read-only (the shared
//! [`Layer::infer`] entry point takes `&self`, and `forward` with
//! [`Mode::Eval`] routes through it).

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::parallel::for_each_chunk_mut;
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Asymmetric zero padding for convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PadSpec {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl PadSpec {
    pub fn symmetric(p: usize) -> Self {
        PadSpec {
            top: p,
            bottom: p,
            left: p,
            right: p,
        }
    }

    /// "Same"-style padding for an even kernel: total k−1, extra on the
    /// bottom/right, so output spatial dims equal input dims at stride 1.
    pub fn same(kernel_h: usize, kernel_w: usize) -> Self {
        PadSpec {
            top: (kernel_h - 1) / 2,
            bottom: kernel_h / 2,
            left: (kernel_w - 1) / 2,
            right: kernel_w / 2,
        }
    }
}

fn shape4(x: &Tensor<impl Real>, what: &str) -> Result<(usize, usize, usize, usize)> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(CoreError::Config(format!(
            "{what}: expected 4-D NCHW input, got {s:?}"
        )));
    }
    Ok((s[0], s[1], s[2], s[3]))
}

fn shape2(x: &Tensor<impl Real>, what: &str) -> Result<(usize, usize)> {
    let s = x.shape();
    if s.len() != 2 {
        return Err(CoreError::Config(format!(
            "{what}: expected 2-D input, got {s:?}"
        )));
    }
    Ok((s[0], s[1]))
}

// ── Conv2d ───────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct Conv2d<T: Real> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub pad: PadSpec,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    cache: Option<Tensor<T>>,
}

impl<T: Real> Conv2d<T> {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        pad: PadSpec,
        seed: u64,
        stream: &str,
        index: u64,
    ) -> Self {
        let fan_in = in_channels * kernel_h * kernel_w;
        Conv2d {
            in_channels,
            out_channels,
            kernel_h,
            kernel_w,
            pad,
            weight: Tensor::kaiming(
                &[out_channels, in_channels, kernel_h, kernel_w],
                fan_in,
                seed,
                stream,
                index,
            ),
            bias: Tensor::zeros(&[out_channels]),
            cache: None,
        }
    }

    pub fn out_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let ho = (h + self.pad.top + self.pad.bottom)
            .checked_sub(self.kernel_h - 1)
            .filter(|&v| v > 0);
        let wo = (w + self.pad.left + self.pad.right)
            .checked_sub(self.kernel_w - 1)
            .filter(|&v| v > 0);
        match (ho, wo) {
            (Some(ho), Some(wo)) => Ok((ho, wo)),
            _ => Err(CoreError::Config(format!(
                "conv2d: input {h}x{w} too small for kernel {}x{} with padding {:?}",
                self.kernel_h, self.kernel_w, self.pad
            ))),
        }
    }

    fn run(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, c, h, w) = shape4(x, "conv2d")?;
        if c != self.in_channels {
            return Err(CoreError::Config(format!(
                "conv2d: expected {} input channels, got {c}",
                self.in_channels
            )));
        }
        let (ho, wo) = self.out_dims(h, w)?;
        let (kh, kw) = (self.kernel_h, self.kernel_w);
        let (pt, pl) = (self.pad.top, self.pad.left);
        let oc_total = self.out_channels;
        let mut out = vec![T::zero(); n * oc_total * ho * wo];
        let xd = x.data();
        let wd = self.weight.data();
        let bd = self.bias.data();
        // One output plane (sample, out-channel) per work item.
        for_each_chunk_mut(&mut out, ho * wo, |plane, o| {
            let ni = plane / oc_total;
            let oc = plane % oc_total;
            o.fill(bd[oc]);
            for ic in 0..c {
                let x_plane = &xd[(ni * c + ic) * h * w..(ni * c + ic + 1) * h * w];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = wd[((oc * c + ic) * kh + ky) * kw + kx];
                        if wv == T::zero() {
                            continue;
                        }
                        // iy = oy − pt + ky must land in [0, h)
                        let oy_lo = pt.saturating_sub(ky);
                        let oy_hi = (h + pt - ky).min(ho);
                        let ox_lo = pl.saturating_sub(kx);
                        let ox_hi = (w + pl - kx).min(wo);
                        for oy in oy_lo..oy_hi {
                            let iy = oy + ky - pt;
                            let row = &x_plane[iy * w..(iy + 1) * w];
                            let orow = &mut o[oy * wo..(oy + 1) * wo];
                            for ox in ox_lo..ox_hi {
                                let ix = ox + kx - pl;
                                orow[ox] = orow[ox] + wv * row[ix];
                            }
                        }
                    }
                }
            }
        });
        Tensor::from_vec(&[n, oc_total, ho, wo], out)
    }

    fn backward(&mut self, upstream: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self
            .cache
            .take()
            .ok_or_else(|| CoreError::State("conv2d backward without train-mode forward".into()))?;
        let (n, c, h, w) = shape4(&x, "conv2d")?;
        let (nn, oc_total, ho, wo) = shape4(upstream, "conv2d upstream")?;
        let (exp_ho, exp_wo) = self.out_dims(h, w)?;
        if nn != n || oc_total != self.out_channels || ho != exp_ho || wo != exp_wo {
            return Err(CoreError::Input(format!(
                "conv2d upstream shape {:?} does not match output [{n}, {}, {exp_ho}, {exp_wo}]",
                upstream.shape(),
                self.out_channels
            )));
        }
        let (kh, kw) = (self.kernel_h, self.kernel_w);
        let (pt, pl) = (self.pad.top, self.pad.left);
        let xd = x.data();
        let gd = upstream.data();
        let wd = self.weight.data();

        // Weight gradient, one out-channel slab per work item.
        let mut dw = vec![T::zero(); self.weight.len()];
        for_each_chunk_mut(&mut dw, c * kh * kw, |oc, slab| {
            for ic in 0..c {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let mut acc = T::zero();
                        for ni in 0..n {
                            let g_plane = &gd[(ni * oc_total + oc) * ho * wo..];
                            let x_plane = &xd[(ni * c + ic) * h * w..];
                            let oy_lo = pt.saturating_sub(ky);
                            let oy_hi = (h + pt - ky).min(ho);
                            let ox_lo = pl.saturating_sub(kx);
                            let ox_hi = (w + pl - kx).min(wo);
                            for oy in oy_lo..oy_hi {
                                let iy = oy + ky - pt;
                                let grow = &g_plane[oy * wo..(oy + 1) * wo];
                                let xrow = &x_plane[iy * w..(iy + 1) * w];
                                for ox in ox_lo..ox_hi {
                                    acc = acc + grow[ox] * xrow[ox + kx - pl];
                                }
                            }
                        }
                        slab[(ic * kh + ky) * kw + kx] = acc;
                    }
                }
            }
        });
        self.weight.accumulate_grad(&dw)?;

        let mut db = vec![T::zero(); oc_total];
        for ni in 0..n {
            for (oc, dbo) in db.iter_mut().enumerate() {
                let g_plane = &gd[(ni * oc_total + oc) * ho * wo..(ni * oc_total + oc + 1) * ho * wo];
                *dbo = *dbo + g_plane.iter().fold(T::zero(), |a, &b| a + b);
            }
        }
        self.bias.accumulate_grad(&db)?;

        // Input gradient, one (sample, in-channel) plane per work item.
        let mut dx = vec![T::zero(); x.len()];
        for_each_chunk_mut(&mut dx, h * w, |plane, dxp| {
            let ni = plane / c;
            let ic = plane % c;
            for oc in 0..oc_total {
                let g_plane = &gd[(ni * oc_total + oc) * ho * wo..];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = wd[((oc * c + ic) * kh + ky) * kw + kx];
                        if wv == T::zero() {
                            continue;
                        }
                        let oy_lo = pt.saturating_sub(ky);
                        let oy_hi = (h + pt - ky).min(ho);
                        let ox_lo = pl.saturating_sub(kx);
                        let ox_hi = (w + pl - kx).min(wo);
                        for oy in oy_lo..oy_hi {
                            let iy = oy + ky - pt;
                            let grow = &g_plane[oy * wo..(oy + 1) * wo];
                            let dxrow = &mut dxp[iy * w..(iy + 1) * w];
                            for ox in ox_lo..ox_hi {
                                let ix = ox + kx - pl;
                                dxrow[ix] = dxrow[ix] + wv * grow[ox];
                            }
                        }
                    }
                }
            }
        });
        Tensor::from_vec(&[n, c, h, w], dx)
    }
}

// ── BatchNorm ────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct BatchNorm<T: Real> {
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    cache: Option<BnCache<T>>,
}

#[derive(Debug, Clone)]
struct BnCache<T: Real> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
}

impl<T: Real> BatchNorm<T> {
    pub fn new(channels: usize, eps: f64, momentum: f64) -> Self {
        BatchNorm {
            channels,
            eps,
            momentum,
            gamma: Tensor::filled(&[channels], T::one()),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::filled(&[channels], T::one()),
            cache: None,
        }
    }

    fn check(&self, x: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
        let (n, c, h, w) = shape4(x, "batchnorm")?;
        if c != self.channels {
            return Err(CoreError::Config(format!(
                "batchnorm: expected {} channels, got {c}",
                self.channels
            )));
        }
        Ok((n, c, h, w))
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, c, h, w) = self.check(x)?;
        let mut out = vec![T::zero(); x.len()];
        let eps = T::from_f64(self.eps);
        let plane = h * w;
        for ni in 0..n {
            for ch in 0..c {
                let scale = self.gamma.data()[ch] / (self.running_var.data()[ch] + eps).sqrt();
                let shift = self.beta.data()[ch] - scale * self.running_mean.data()[ch];
                let base = (ni * c + ch) * plane;
                for i in 0..plane {
                    out[base + i] = scale * x.data()[base + i] + shift;
                }
            }
        }
        Tensor::from_vec(&[n, c, h, w], out)
    }

    fn train_forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, c, h, w) = self.check(x)?;
        let plane = h * w;
        let m = T::from_usize(n * plane);
        let eps = T::from_f64(self.eps);
        let mom = T::from_f64(self.momentum);
        let mut out = vec![T::zero(); x.len()];
        let mut xhat = vec![T::zero(); x.len()];
        let mut inv_std = vec![T::zero(); c];
        for ch in 0..c {
            let mut mean = T::zero();
            for ni in 0..n {
                let base = (ni * c + ch) * plane;
                for i in 0..plane {
                    mean = mean + x.data()[base + i];
                }
            }
            mean = mean / m;
            let mut var = T::zero();
            for ni in 0..n {
                let base = (ni * c + ch) * plane;
                for i in 0..plane {
                    let d = x.data()[base + i] - mean;
                    var = var + d * d;
                }
            }
            var = var / m;
            let istd = T::one() / (var + eps).sqrt();
            inv_std[ch] = istd;
            let g = self.gamma.data()[ch];
            let b = self.beta.data()[ch];
            for ni in 0..n {
                let base = (ni * c + ch) * plane;
                for i in 0..plane {
                    let xh = (x.data()[base + i] - mean) * istd;
                    xhat[base + i] = xh;
                    out[base + i] = g * xh + b;
                }
            }
            // Running stats updated only in training mode.
            let rm = self.running_mean.data_mut();
            rm[ch] = (T::one() - mom) * rm[ch] + mom * mean;
            let rv = self.running_var.data_mut();
            rv[ch] = (T::one() - mom) * rv[ch] + mom * var;
        }
        self.cache = Some(BnCache {
            xhat: Tensor::from_vec(&[n, c, h, w], xhat)?,
            inv_std,
        });
        Tensor::from_vec(&[n, c, h, w], out)
    }

    fn backward(&mut self, upstream: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self.cache.take().ok_or_else(|| {
            CoreError::State("batchnorm backward without train-mode forward".into())
        })?;
        let (n, c, h, w) = shape4(&cache.xhat, "batchnorm cache")?;
        if upstream.shape() != cache.xhat.shape() {
            return Err(CoreError::Input(format!(
                "batchnorm upstream shape {:?} does not match {:?}",
                upstream.shape(),
                cache.xhat.shape()
            )));
        }
        let plane = h * w;
        let m = T::from_usize(n * plane);
        let gd = upstream.data();
        let xh = cache.xhat.data();
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        let mut dx = vec![T::zero(); upstream.len()];
        for ch in 0..c {
            let mut sum_g = T::zero();
            let mut sum_gx = T::zero();
            for ni in 0..n {
                let base = (ni * c + ch) * plane;
                for i in 0..plane {
                    sum_g = sum_g + gd[base + i];
                    sum_gx = sum_gx + gd[base + i] * xh[base + i];
                }
            }
            dgamma[ch] = sum_gx;
            dbeta[ch] = sum_g;
            let scale = self.gamma.data()[ch] * cache.inv_std[ch] / m;
            for ni in 0..n {
                let base = (ni * c + ch) * plane;
                for i in 0..plane {
                    dx[base + i] =
                        scale * (m * gd[base + i] - sum_g - xh[base + i] * sum_gx);
                }
            }
        }
        self.gamma.accumulate_grad(&dgamma)?;
        self.beta.accumulate_grad(&dbeta)?;
        Tensor::from_vec(&[n, c, h, w], dx)
    }
}

// ── MaxPool ──────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct MaxPool<T: Real> {
    pub window_h: usize,
    pub window_w: usize,
    pub stride_h: usize,
    pub stride_w: usize,
    cache: Option<PoolCache>,
    _marker: core::marker::PhantomData<T>,
}

#[derive(Debug, Clone)]
struct PoolCache {
    in_shape: Vec<usize>,
    argmax: Vec<usize>,
}

impl<T: Real> MaxPool<T> {
    pub fn new(window_h: usize, window_w: usize, stride_h: usize, stride_w: usize) -> Self {
        MaxPool {
            window_h,
            window_w,
            stride_h,
            stride_w,
            cache: None,
            _marker: core::marker::PhantomData,
        }
    }

    pub fn out_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if h < self.window_h || w < self.window_w {
            return Err(CoreError::Config(format!(
                "maxpool: input {h}x{w} smaller than window {}x{}",
                self.window_h, self.window_w
            )));
        }
        Ok((
            (h - self.window_h) / self.stride_h + 1,
            (w - self.window_w) / self.stride_w + 1,
        ))
    }

    fn run(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
        let (n, c, h, w) = shape4(x, "maxpool")?;
        let (ho, wo) = self.out_dims(h, w)?;
        let mut out = vec![T::zero(); n * c * ho * wo];
        let mut argmax = vec![0usize; n * c * ho * wo];
        let xd = x.data();
        for plane in 0..n * c {
            let xp = &xd[plane * h * w..(plane + 1) * h * w];
            for oy in 0..ho {
                for ox in 0..wo {
                    let (y0, x0) = (oy * self.stride_h, ox * self.stride_w);
                    let mut best = T::neg_infinity();
                    let mut best_idx = 0;
                    for ky in 0..self.window_h {
                        for kx in 0..self.window_w {
                            let idx = (y0 + ky) * w + (x0 + kx);
                            if xp[idx] > best {
                                best = xp[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = (plane * ho + oy) * wo + ox;
                    out[o] = best;
                    argmax[o] = plane * h * w + best_idx;
                }
            }
        }
        Ok((Tensor::from_vec(&[n, c, ho, wo], out)?, argmax))
    }

    fn backward(&mut self, upstream: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self.cache.take().ok_or_else(|| {
            CoreError::State("maxpool backward without train-mode forward".into())
        })?;
        if upstream.len() != cache.argmax.len() {
            return Err(CoreError::Input(format!(
                "maxpool upstream length {} does not match cached {} outputs",
                upstream.len(),
                cache.argmax.len()
            )));
        }
        let mut dx = vec![T::zero(); cache.in_shape.iter().product()];
        for (g, &idx) in upstream.data().iter().zip(&cache.argmax) {
            dx[idx] = dx[idx] + *g;
        }
        Tensor::from_vec(&cache.in_shape, dx)
    }
}

// ── Relu / Flatten ───────────────────────────────────────────────────

#[derive(Debug, Clone, Default)]
pub struct Relu<T: Real> {
    cache: Option<Tensor<T>>,
}

#[derive(Debug, Clone, Default)]
pub struct Flatten {
    cache: Option<Vec<usize>>,
}

// ── Dense ────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct Dense<T: Real> {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    cache: Option<Tensor<T>>,
}

impl<T: Real> Dense<T> {
    pub fn new(
        in_features: usize,
        out_features: usize,
        seed: u64,
        stream: &str,
        index: u64,
    ) -> Self {
        Dense {
            in_features,
            out_features,
            weight: Tensor::kaiming(&[out_features, in_features], in_features, seed, stream, index),
            bias: Tensor::zeros(&[out_features]),
            cache: None,
        }
    }

    fn run(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, d) = shape2(x, "dense")?;
        if d != self.in_features {
            return Err(CoreError::Config(format!(
                "dense: expected {} input features, got {d}",
                self.in_features
            )));
        }
        let o = self.out_features;
        let mut out = vec![T::zero(); n * o];
        let wd = self.weight.data();
        let bd = self.bias.data();
        let xd = x.data();
        for_each_chunk_mut(&mut out, o, |ni, row| {
            let xrow = &xd[ni * d..(ni + 1) * d];
            for (oi, r) in row.iter_mut().enumerate() {
                let wrow = &wd[oi * d..(oi + 1) * d];
                let mut acc = bd[oi];
                for i in 0..d {
                    acc = acc + wrow[i] * xrow[i];
                }
                *r = acc;
            }
        });
        Tensor::from_vec(&[n, o], out)
    }

    fn backward(&mut self, upstream: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self
            .cache
            .take()
            .ok_or_else(|| CoreError::State("dense backward without train-mode forward".into()))?;
        let (n, d) = shape2(&x, "dense cache")?;
        let (nn, o) = shape2(upstream, "dense upstream")?;
        if nn != n || o != self.out_features {
            return Err(CoreError::Input(format!(
                "dense upstream shape {:?} does not match [{n}, {}]",
                upstream.shape(),
                self.out_features
            )));
        }
        let gd = upstream.data();
        let xd = x.data();
        let mut dw = vec![T::zero(); o * d];
        for_each_chunk_mut(&mut dw, d, |oi, wrow| {
            for ni in 0..n {
                let g = gd[ni * o + oi];
                if g == T::zero() {
                    continue;
                }
                let xrow = &xd[ni * d..(ni + 1) * d];
                for i in 0..d {
                    wrow[i] = wrow[i] + g * xrow[i];
                }
            }
        });
        self.weight.accumulate_grad(&dw)?;
        let mut db = vec![T::zero(); o];
        for ni in 0..n {
            for (oi, b) in db.iter_mut().enumerate() {
                *b = *b + gd[ni * o + oi];
            }
        }
        self.bias.accumulate_grad(&db)?;

        let wd = self.weight.data();
        let mut dx = vec![T::zero(); n * d];
        for_each_chunk_mut(&mut dx, d, |ni, dxrow| {
            for oi in 0..o {
                let g = gd[ni * o + oi];
                if g == T::zero() {
                    continue;
                }
                let wrow = &wd[oi * d..(oi + 1) * d];
                for i in 0..d {
                    dxrow[i] = dxrow[i] + g * wrow[i];
                }
            }
        });
        Tensor::from_vec(&[n, d], dx)
    }
}

// ── Softmax ──────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct Softmax<T: Real> {
    pub temperature: T,
    cache: Option<Tensor<T>>,
}

impl<T: Real> Softmax<T> {
    pub fn new(temperature: T) -> Self {
        Softmax {
            temperature,
            cache: None,
        }
    }

    fn run(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        shape2(x, "softmax")?;
        crate::divergence::softmax_rows(x, self.temperature)
    }

    fn backward(&mut self, upstream: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self
            .cache
            .take()
            .ok_or_else(|| CoreError::State("softmax backward without train-mode forward".into()))?;
        if upstream.shape() != y.shape() {
            return Err(CoreError::Input(format!(
                "softmax upstream shape {:?} does not match {:?}",
                upstream.shape(),
                y.shape()
            )));
        }
        let (n, k) = shape2(&y, "softmax cache")?;
        let mut dx = vec![T::zero(); n * k];
        for i in 0..n {
            let yr = &y.data()[i * k..(i + 1) * k];
            let gr = &upstream.data()[i * k..(i + 1) * k];
            let mut dot = T::zero();
            for j in 0..k {
                dot = dot + yr[j] * gr[j];
            }
            for j in 0..k {
                dx[i * k + j] = yr[j] * (gr[j] - dot) / self.temperature;
            }
        }
        Tensor::from_vec(&[n, k], dx)
    }
}

// ── Layer dispatch ───────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub enum Layer<T: Real> {
    Conv2d(Conv2d<T>),
    BatchNorm(BatchNorm<T>),
    Relu(Relu<T>),
    MaxPool(MaxPool<T>),
    Flatten(Flatten),
    Dense(Dense<T>),
    Softmax(Softmax<T>),
}

impl<T: Real> Layer<T> {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv2d(_) => "conv2d",
            Layer::BatchNorm(_) => "batchnorm",
            Layer::Relu(_) => "relu",
            Layer::MaxPool(_) => "maxpool",
            Layer::Flatten(_) => "flatten",
            Layer::Dense(_) => "dense",
            Layer::Softmax(_) => "softmax",
        }
    }

    /// Eval-mode forward; read-only, shareable across threads.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Layer::Conv2d(l) => l.run(x),
            Layer::BatchNorm(l) => l.infer(x),
            Layer::Relu(_) => {
                let data = x.data().iter().map(|&v| v.max(T::zero())).collect();
                Tensor::from_vec(x.shape(), data)
            }
            Layer::MaxPool(l) => Ok(l.run(x)?.0),
            Layer::Flatten(_) => {
                let n = x.shape()[0];
                let rest: usize = x.shape()[1..].iter().product();
                x.clone().reshaped(&[n, rest])
            }
            Layer::Dense(l) => l.run(x),
            Layer::Softmax(l) => l.run(x),
        }
    }

    /// Forward pass; train mode caches what backward needs, eval mode is
    /// identical to [`Layer::infer`].
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        if mode == Mode::Eval {
            return self.infer(x);
        }
        match self {
            Layer::Conv2d(l) => {
                let out = l.run(x)?;
                l.cache = Some(x.clone());
                Ok(out)
            }
            Layer::BatchNorm(l) => l.train_forward(x),
            Layer::Relu(l) => {
                let data = x.data().iter().map(|&v| v.max(T::zero())).collect();
                l.cache = Some(x.clone());
                Tensor::from_vec(x.shape(), data)
            }
            Layer::MaxPool(l) => {
                let (out, argmax) = l.run(x)?;
                l.cache = Some(PoolCache {
                    in_shape: x.shape().to_vec(),
                    argmax,
                });
                Ok(out)
            }
            Layer::Flatten(l) => {
                l.cache = Some(x.shape().to_vec());
                let n = x.shape()[0];
                let rest: usize = x.shape()[1..].iter().product();
                x.clone().reshaped(&[n, rest])
            }
            Layer::Dense(l) => {
                let out = l.run(x)?;
                l.cache = Some(x.clone());
                Ok(out)
            }
            Layer::Softmax(l) => {
                let out = l.run(x)?;
                l.cache = Some(out.clone());
                Ok(out)
            }
        }
    }

    /// Backward through the cached train-mode forward. Returns the input
    /// gradient; parameter gradients accumulate into the parameter tensors
    /// (visible through [`Layer::params`]).
    pub fn backward(&mut self, upstream: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Layer::Conv2d(l) => l.backward(upstream),
            Layer::BatchNorm(l) => l.backward(upstream),
            Layer::Relu(l) => {
                let x = l.cache.take().ok_or_else(|| {
                    CoreError::State("relu backward without train-mode forward".into())
                })?;
                if upstream.shape() != x.shape() {
                    return Err(CoreError::Input(format!(
                        "relu upstream shape {:?} does not match {:?}",
                        upstream.shape(),
                        x.shape()
                    )));
                }
                let data = x
                    .data()
                    .iter()
                    .zip(upstream.data())
                    .map(|(&xi, &g)| if xi > T::zero() { g } else { T::zero() })
                    .collect();
                Tensor::from_vec(x.shape(), data)
            }
            Layer::MaxPool(l) => l.backward(upstream),
            Layer::Flatten(l) => {
                let shape = l.cache.take().ok_or_else(|| {
                    CoreError::State("flatten backward without train-mode forward".into())
                })?;
                upstream.clone().reshaped(&shape)
            }
            Layer::Dense(l) => l.backward(upstream),
            Layer::Softmax(l) => l.backward(upstream),
        }
    }

    /// Learnable parameters as (name, tensor) pairs.
    pub fn params(&self) -> Vec<(&'static str, &Tensor<T>)> {
        match self {
            Layer::Conv2d(l) => vec![("weight", &l.weight), ("bias", &l.bias)],
            Layer::BatchNorm(l) => vec![("gamma", &l.gamma), ("beta", &l.beta)],
            Layer::Dense(l) => vec![("weight", &l.weight), ("bias", &l.bias)],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        match self {
            Layer::Conv2d(l) => vec![("weight", &mut l.weight), ("bias", &mut l.bias)],
            Layer::BatchNorm(l) => vec![("gamma", &mut l.gamma), ("beta", &mut l.beta)],
            Layer::Dense(l) => vec![("weight", &mut l.weight), ("bias", &mut l.bias)],
            _ => Vec::new(),
        }
    }

    /// Non-learnable persistent state (batchnorm running statistics).
    pub fn state_tensors(&self) -> Vec<(&'static str, &Tensor<T>)> {
        match self {
            Layer::BatchNorm(l) => vec![
                ("running_mean", &l.running_mean),
                ("running_var", &l.running_var),
            ],
            _ => Vec::new(),
        }
    }

    pub fn state_tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        match self {
            Layer::BatchNorm(l) => vec![
                ("running_mean", &mut l.running_mean),
                ("running_var", &mut l.running_var),
            ],
            _ => Vec::new(),
        }
    }

    /// Drop any cached forward state and gradients.
    pub fn reset(&mut self) {
        match self {
            Layer::Conv2d(l) => l.cache = None,
            Layer::BatchNorm(l) => l.cache = None,
            Layer::Relu(l) => l.cache = None,
            Layer::MaxPool(l) => l.cache = None,
            Layer::Flatten(l) => l.cache = None,
            Layer::Dense(l) => l.cache = None,
            Layer::Softmax(l) => l.cache = None,
        }
        for (_, p) in self.params_mut() {
            p.clear_grad();
        }
    }

    /// Convert element precision, dropping caches and gradients.
    pub fn cast<U: Real>(&self) -> Layer<U> {
        match self {
            Layer::Conv2d(l) => Layer::Conv2d(Conv2d {
                in_channels: l.in_channels,
                out_channels: l.out_channels,
                kernel_h: l.kernel_h,
                kernel_w: l.kernel_w,
                pad: l.pad,
                weight: l.weight.cast(),
                bias: l.bias.cast(),
                cache: None,
            }),
            Layer::BatchNorm(l) => Layer::BatchNorm(BatchNorm {
                channels: l.channels,
                eps: l.eps,
                momentum: l.momentum,
                gamma: l.gamma.cast(),
                beta: l.beta.cast(),
                running_mean: l.running_mean.cast(),
                running_var: l.running_var.cast(),
                cache: None,
            }),
            Layer::Relu(_) => Layer::Relu(Relu::default()),
            Layer::MaxPool(l) => Layer::MaxPool(MaxPool::new(
                l.window_h, l.window_w, l.stride_h, l.stride_w,
            )),
            Layer::Flatten(_) => Layer::Flatten(Flatten::default()),
            Layer::Dense(l) => Layer::Dense(Dense {
                in_features: l.in_features,
                out_features: l.out_features,
                weight: l.weight.cast(),
                bias: l.bias.cast(),
                cache: None,
            }),
            Layer::Softmax(l) => Layer::Softmax(Softmax::new(U::from_f64(l.temperature.to_f64()))),
        }
    }
}
