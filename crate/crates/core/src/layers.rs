//! Linear building blocks with hand-written reverse-mode passes:
//! size-preserving 2D convolution, batch normalization, ELU and 2x2 average
//! pooling.
//!
//! Backward passes accumulate parameter gradients into the parameters' grad
//! buffers and return the gradient with respect to the layer input.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::gemm;
use crate::tensor::{Shape, Tensor};

/// Weights `[out][in][k][k]` and bias `[out]` of a stride-1 convolution with
/// zero padding `(k - 1) / 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ConvParams {
    pub fn zeros(in_channels: usize, out_channels: usize, kernel: usize) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::Config(format!("kernel size {kernel} must be odd")));
        }
        let weight = Tensor::zeros(Shape::new(out_channels * in_channels, kernel, kernel)?);
        let bias = Tensor::zeros(Shape::new(out_channels, 1, 1)?);
        Ok(Self {
            in_channels,
            out_channels,
            kernel,
            weight,
            bias,
        })
    }

    /// He-style uniform init, bound `sqrt(6 / fan_in)`, zero bias.
    pub fn fan_in_uniform<R: Rng>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut p = Self::zeros(in_channels, out_channels, kernel)?;
        let bound = (6.0 / (in_channels * kernel * kernel) as f64).sqrt();
        for w in p.weight.values_mut() {
            *w = rng.gen_range(-bound..bound);
        }
        Ok(p)
    }

    /// Kernel that copies input channel `i` to output channel `i`.
    pub fn identity(channels: usize, kernel: usize) -> Result<Self> {
        let mut p = Self::zeros(channels, channels, kernel)?;
        let kk = kernel * kernel;
        let centre = kk / 2;
        for c in 0..channels {
            p.weight.values_mut()[(c * channels + c) * kk + centre] = 1.0;
        }
        Ok(p)
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    pub fn pad(&self) -> usize {
        (self.kernel - 1) / 2
    }

    pub fn zero_grad(&mut self) {
        self.weight.zero_grad();
        self.bias.zero_grad();
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        if input.channels() != self.in_channels {
            return Err(Error::Shape(format!(
                "convolution expects {} input channels, got {}",
                self.in_channels,
                input.channels()
            )));
        }
        Ok(())
    }
}

/// Parameter gradients of one convolution evaluated on one input.
#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvGrads {
    pub fn add(&mut self, other: &ConvGrads) {
        for (a, b) in self.weight.iter_mut().zip(&other.weight) {
            *a += b;
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += b;
        }
    }

    pub fn apply_to(&self, p: &mut ConvParams) {
        p.weight.accumulate_grad(&self.weight);
        p.bias.accumulate_grad(&self.bias);
    }
}

/// Unfolds `input` into a `(C*k*k) x (H*W)` column matrix with zero padding.
fn im2col(input: &Tensor, kernel: usize) -> Vec<f64> {
    let (c_in, h, w) = (input.channels(), input.height(), input.width());
    let pad = (kernel - 1) / 2;
    let hw = h * w;
    let mut cols = vec![0.0; c_in * kernel * kernel * hw];
    for c in 0..c_in {
        let plane = input.channel(c);
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (c * kernel + ky) * kernel + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let dx = kx as isize - pad as isize;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    let d = &mut dst[y * w..(y + 1) * w];
                    let s0 = (x_lo as isize + dx) as usize;
                    d[x_lo..x_hi].copy_from_slice(&src[s0..s0 + (x_hi - x_lo)]);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: folds column gradients back onto the input grid.
fn col2im(cols: &[f64], shape: Shape, kernel: usize) -> Tensor {
    let (c_in, h, w) = (shape.channels, shape.height, shape.width);
    let pad = (kernel - 1) / 2;
    let hw = h * w;
    let mut out = Tensor::zeros(shape);
    for c in 0..c_in {
        let plane = out.channel_mut(c);
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (c * kernel + ky) * kernel + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let dx = kx as isize - pad as isize;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let s = &src[y * w + x_lo..y * w + x_hi];
                    let base = sy as usize * w + (x_lo as isize + dx) as usize;
                    for (d, v) in plane[base..base + s.len()].iter_mut().zip(s) {
                        *d += v;
                    }
                }
            }
        }
    }
    out
}

/// Applies a weight matrix to unfolded columns and adds the bias.
pub(crate) fn apply_columns(cols: &[f64], p: &ConvParams, h: usize, w: usize) -> Tensor {
    let hw = h * w;
    let rows = p.in_channels * p.kernel * p.kernel;
    let mut values = vec![0.0; p.out_channels * hw];
    for (o, b) in p.bias.values().iter().enumerate() {
        values[o * hw..(o + 1) * hw].iter_mut().for_each(|v| *v = *b);
    }
    gemm(
        p.out_channels,
        rows,
        hw,
        p.weight.values(),
        false,
        cols,
        false,
        1.0,
        &mut values,
    );
    Tensor::from_vec(
        Shape {
            channels: p.out_channels,
            height: h,
            width: w,
        },
        values,
    )
    .expect("conv output shape")
}

/// Parameter gradients and column gradients given unfolded columns.
pub(crate) fn columns_backward(
    cols: &[f64],
    p: &ConvParams,
    grad_out: &Tensor,
) -> (ConvGrads, Vec<f64>) {
    let hw = grad_out.height() * grad_out.width();
    let rows = p.in_channels * p.kernel * p.kernel;
    let mut dw = vec![0.0; p.out_channels * rows];
    gemm(
        p.out_channels,
        hw,
        rows,
        grad_out.values(),
        false,
        cols,
        true,
        0.0,
        &mut dw,
    );
    let db = (0..p.out_channels)
        .map(|o| grad_out.channel(o).iter().sum())
        .collect();
    let mut dcols = vec![0.0; rows * hw];
    gemm(
        rows,
        p.out_channels,
        hw,
        p.weight.values(),
        true,
        grad_out.values(),
        false,
        0.0,
        &mut dcols,
    );
    (
        ConvGrads {
            weight: dw,
            bias: db,
        },
        dcols,
    )
}

pub fn conv2d(input: &Tensor, p: &ConvParams) -> Result<Tensor> {
    p.check_input(input)?;
    let cols = im2col(input, p.kernel);
    Ok(apply_columns(&cols, p, input.height(), input.width()))
}

/// Returns the input gradient together with the parameter gradients, leaving
/// `p` untouched.
pub fn conv2d_grads(input: &Tensor, p: &ConvParams, grad_out: &Tensor) -> Result<(Tensor, ConvGrads)> {
    p.check_input(input)?;
    let expected = input.shape().with_channels(p.out_channels);
    if grad_out.shape() != expected {
        return Err(Error::Shape(format!(
            "conv output gradient is {}, expected {expected}",
            grad_out.shape()
        )));
    }
    let cols = im2col(input, p.kernel);
    let (grads, dcols) = columns_backward(&cols, p, grad_out);
    Ok((col2im(&dcols, input.shape(), p.kernel), grads))
}

/// Backward pass: accumulates weight/bias gradients into `p` and returns the
/// gradient with respect to `input`.
pub fn conv2d_backward(input: &Tensor, p: &mut ConvParams, grad_out: &Tensor) -> Result<Tensor> {
    let (gi, grads) = conv2d_grads(input, p, grad_out)?;
    grads.apply_to(p);
    Ok(gi)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BnMode {
    Train,
    Infer,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
    pub mode: BnMode,
}

impl BatchNormParams {
    pub fn new(channels: usize) -> Result<Self> {
        let shape = Shape::new(channels, 1, 1)?;
        Ok(Self {
            gamma: Tensor::make(shape, 1.0),
            beta: Tensor::zeros(shape),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
            mode: BnMode::Train,
        })
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    pub fn zero_grad(&mut self) {
        self.gamma.zero_grad();
        self.beta.zero_grad();
    }

    /// Exponential moving average of the statistics recorded in `cache`.
    /// No-op for caches produced in inference mode.
    pub fn update_running(&mut self, cache: &BnCache) {
        if cache.mode != BnMode::Train {
            return;
        }
        let m = self.momentum;
        for c in 0..self.channels() {
            self.running_mean[c] = (1.0 - m) * self.running_mean[c] + m * cache.mean[c];
            self.running_var[c] = (1.0 - m) * self.running_var[c] + m * cache.var[c];
        }
    }
}

/// Intermediates kept by a batch-norm forward pass.
#[derive(Debug, Clone)]
pub struct BnCache {
    mode: BnMode,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    inv_std: Vec<f64>,
    xhat: Vec<Tensor>,
}

/// Pure forward pass; does not touch running statistics.
pub fn batchnorm_forward(inputs: &[Tensor], p: &BatchNormParams) -> Result<(Vec<Tensor>, BnCache)> {
    if inputs.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let channels = p.channels();
    for t in inputs {
        if t.channels() != channels {
            return Err(Error::Shape(format!(
                "batch norm over {channels} channels given {}",
                t.shape()
            )));
        }
    }
    let (mean, var) = match p.mode {
        BnMode::Train => {
            let mut mean = vec![0.0; channels];
            let mut var = vec![0.0; channels];
            for c in 0..channels {
                let n: usize = inputs.iter().map(|t| t.channel(c).len()).sum();
                let s: f64 = inputs.iter().map(|t| t.channel(c).iter().sum::<f64>()).sum();
                let mu = s / n as f64;
                let ss: f64 = inputs
                    .iter()
                    .map(|t| t.channel(c).iter().map(|v| (v - mu) * (v - mu)).sum::<f64>())
                    .sum();
                mean[c] = mu;
                var[c] = ss / n as f64;
            }
            (mean, var)
        }
        BnMode::Infer => (p.running_mean.clone(), p.running_var.clone()),
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + p.eps).sqrt()).collect();
    let mut xhat = Vec::with_capacity(inputs.len());
    let mut outputs = Vec::with_capacity(inputs.len());
    for t in inputs {
        let mut xh = t.clone();
        let mut y = t.clone();
        for c in 0..channels {
            let (g, b) = (p.gamma.values()[c], p.beta.values()[c]);
            for (xv, yv) in xh.channel_mut(c).iter_mut().zip(y.channel_mut(c).iter_mut()) {
                let n = (*xv - mean[c]) * inv_std[c];
                *xv = n;
                *yv = g * n + b;
            }
        }
        xhat.push(xh);
        outputs.push(y);
    }
    Ok((
        outputs,
        BnCache {
            mode: p.mode,
            mean,
            var,
            inv_std,
            xhat,
        },
    ))
}

/// Forward pass that also folds the batch statistics into the running
/// estimates when in training mode.
pub fn batchnorm(inputs: &[Tensor], p: &mut BatchNormParams) -> Result<(Vec<Tensor>, BnCache)> {
    let (out, cache) = batchnorm_forward(inputs, p)?;
    p.update_running(&cache);
    Ok((out, cache))
}

/// Gamma and beta gradients of one batch-norm evaluation.
#[derive(Debug, Clone)]
pub struct BnGrads {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

pub fn batchnorm_grads(
    cache: &BnCache,
    p: &BatchNormParams,
    grad_outs: &[Tensor],
) -> Result<(Vec<Tensor>, BnGrads)> {
    if grad_outs.len() != cache.xhat.len() {
        return Err(Error::Shape(format!(
            "batch norm backward got {} gradients for a batch of {}",
            grad_outs.len(),
            cache.xhat.len()
        )));
    }
    let channels = p.channels();
    let mut dgamma = vec![0.0; channels];
    let mut dbeta = vec![0.0; channels];
    for (g, xh) in grad_outs.iter().zip(&cache.xhat) {
        xh.ensure_same_shape(g, "batch norm gradient")?;
        for c in 0..channels {
            for (dy, x) in g.channel(c).iter().zip(xh.channel(c)) {
                dbeta[c] += dy;
                dgamma[c] += dy * x;
            }
        }
    }
    let mut grads_in = Vec::with_capacity(grad_outs.len());
    for (g, xh) in grad_outs.iter().zip(&cache.xhat) {
        let mut dx = g.clone();
        for c in 0..channels {
            let scale = p.gamma.values()[c] * cache.inv_std[c];
            match cache.mode {
                BnMode::Train => {
                    let n: usize = cache.xhat.iter().map(|t| t.channel(c).len()).sum();
                    let n = n as f64;
                    let (sb, sg) = (dbeta[c] / n, dgamma[c] / n);
                    for (d, x) in dx.channel_mut(c).iter_mut().zip(xh.channel(c)) {
                        *d = scale * (*d - sb - x * sg);
                    }
                }
                BnMode::Infer => {
                    dx.channel_mut(c).iter_mut().for_each(|d| *d *= scale);
                }
            }
        }
        grads_in.push(dx);
    }
    Ok((
        grads_in,
        BnGrads {
            gamma: dgamma,
            beta: dbeta,
        },
    ))
}

pub fn batchnorm_backward(
    cache: &BnCache,
    p: &mut BatchNormParams,
    grad_outs: &[Tensor],
) -> Result<Vec<Tensor>> {
    let (gi, grads) = batchnorm_grads(cache, p, grad_outs)?;
    p.gamma.accumulate_grad(&grads.gamma);
    p.beta.accumulate_grad(&grads.beta);
    Ok(gi)
}

/// ELU with alpha = 1.
pub fn elu(input: &Tensor) -> Tensor {
    let mut out = input.clone();
    out.values_mut()
        .iter_mut()
        .for_each(|v| *v = if *v > 0.0 { *v } else { v.exp_m1() });
    out
}

pub fn elu_backward(input: &Tensor, grad_out: &Tensor) -> Tensor {
    let mut g = grad_out.clone();
    for (d, x) in g.values_mut().iter_mut().zip(input.values()) {
        if *x <= 0.0 {
            *d *= x.exp();
        }
    }
    g
}

/// Mean of each 2x2 block.
pub fn avgpool2(input: &Tensor) -> Result<Tensor> {
    let (h, w) = (input.height(), input.width());
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Indivisible {
            height: h,
            width: w,
            divisor: 2,
        });
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(Shape::new(input.channels(), oh, ow)?);
    for c in 0..input.channels() {
        let src = input.channel(c);
        let dst = out.channel_mut(c);
        for y in 0..oh {
            let r0 = &src[2 * y * w..(2 * y + 1) * w];
            let r1 = &src[(2 * y + 1) * w..(2 * y + 2) * w];
            for x in 0..ow {
                dst[y * ow + x] = 0.25 * (r0[2 * x] + r0[2 * x + 1] + r1[2 * x] + r1[2 * x + 1]);
            }
        }
    }
    Ok(out)
}

pub fn avgpool2_backward(grad_out: &Tensor) -> Tensor {
    let (oh, ow) = (grad_out.height(), grad_out.width());
    let (h, w) = (oh * 2, ow * 2);
    let mut g = Tensor::zeros(Shape {
        channels: grad_out.channels(),
        height: h,
        width: w,
    });
    for c in 0..grad_out.channels() {
        let src = grad_out.channel(c);
        let dst = g.channel_mut(c);
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = 0.25 * src[(y / 2) * ow + x / 2];
            }
        }
    }
    g
}
