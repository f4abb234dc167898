//! The registration network and its coarse-to-fine warping recursion.
//!
//! A forward pass over a batch of image pyramids runs, from the coarsest level
//! to the finest:
//!
//! 1. warp the level's original source image with the accumulated field,
//! 2. feed `[warped source, target]` through the convolutional trunk, which
//!    returns a field at half the level's resolution,
//! 3. upsample that field with the spline resampler and pass it through the
//!    learned 2 -> 2 head, giving the level residual,
//! 4. add the residual to the accumulated field, record the coarse-level loss
//!    inputs, and upsample the accumulated field to the next level.
//!
//! Batch normalization couples the batch, so every layer processes the whole
//! batch at once; everything else runs per element in parallel.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::deform::{deform_conv2d, deform_conv2d_grads, DeformConvParams, DeformGrads};
use crate::error::{Error, Result};
use crate::layers::{
    avgpool2, avgpool2_backward, batchnorm_forward, batchnorm_grads, conv2d, conv2d_grads, elu,
    elu_backward, BatchNormParams, BnCache, BnGrads, BnMode, ConvGrads, ConvParams, BN_EPS,
    BN_MOMENTUM,
};
use crate::loss::OutputGrads;
use crate::sampling::{upsample_dvf, upsample_dvf_backward, warp_image, warp_image_backward, Dvf, KernelKind};
use crate::tensor::{Shape, Tensor};

/// Index of the layer followed by 2x2 average pooling.
pub const POOL_AFTER: usize = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub levels: usize,
    /// `(in, out)` channels per convolution layer.
    pub channels: Vec<(usize, usize)>,
    pub kernel: usize,
    /// Layers built as deformable convolutions.
    pub deformable: Vec<usize>,
    pub image_warp_kernel: KernelKind,
    pub dvf_kernel: KernelKind,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            levels: 4,
            channels: vec![
                (2, 64),
                (64, 64),
                (64, 64),
                (64, 32),
                (32, 32),
                (32, 16),
                (16, 16),
                (16, 2),
            ],
            kernel: 3,
            deformable: vec![4, 5, 6],
            image_warp_kernel: KernelKind::Bilinear,
            dvf_kernel: KernelKind::CatmullRom,
            bn_eps: BN_EPS,
            bn_momentum: BN_MOMENTUM,
        }
    }
}

impl ModelConfig {
    /// Default schedule with every hidden width divided by `divisor`
    /// (rounded down, at least 1). The 2-channel input and output stay.
    pub fn with_width_divisor(mut self, divisor: usize) -> Self {
        let d = divisor.max(1);
        let n = self.channels.len();
        for (i, (cin, cout)) in self.channels.iter_mut().enumerate() {
            if i > 0 {
                *cin = (*cin / d).max(1);
            }
            if i + 1 < n {
                *cout = (*cout / d).max(1);
            }
        }
        self
    }

    pub fn with_levels(mut self, levels: usize) -> Self {
        self.levels = levels;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.levels == 0 {
            return bad("at least one pyramid level is required".into());
        }
        if self.channels.len() <= POOL_AFTER + 1 {
            return bad(format!("{} layers is too few", self.channels.len()));
        }
        if self.channels[0].0 != 2 {
            return bad("the first layer must take the 2-channel image pair".into());
        }
        if self.channels.last().map(|c| c.1) != Some(2) {
            return bad("the last layer must produce 2 channels".into());
        }
        for w in self.channels.windows(2) {
            if w[0].1 != w[1].0 {
                return bad(format!("channel chain broken at {:?} -> {:?}", w[0], w[1]));
            }
        }
        if self.channels.iter().any(|&(a, b)| a == 0 || b == 0) {
            return bad("zero-width layer".into());
        }
        if self.kernel % 2 == 0 {
            return bad(format!("kernel size {} must be odd", self.kernel));
        }
        let last = self.channels.len() - 1;
        for (i, &d) in self.deformable.iter().enumerate() {
            if d >= last {
                return bad(format!("layer {d} cannot be deformable (the final projection is linear)"));
            }
            if self.deformable[..i].contains(&d) {
                return bad(format!("layer {d} listed twice as deformable"));
            }
        }
        if !(self.bn_eps > 0.0) {
            return bad("batch-norm eps must be positive".into());
        }
        Ok(())
    }

    /// Images must shrink to an even size at the coarsest level.
    pub fn size_divisor(&self) -> usize {
        1 << self.levels
    }

    fn is_deformable(&self, layer: usize) -> bool {
        self.deformable.contains(&layer)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ConvLayer {
    Linear(ConvParams),
    Deformable(DeformConvParams),
}

impl ConvLayer {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            ConvLayer::Linear(p) => conv2d(x, p),
            ConvLayer::Deformable(p) => deform_conv2d(x, p),
        }
    }

    fn grads(&self, x: &Tensor, g: &Tensor) -> Result<(Tensor, ConvLayerGrads)> {
        match self {
            ConvLayer::Linear(p) => {
                let (gi, gr) = conv2d_grads(x, p, g)?;
                Ok((gi, ConvLayerGrads::Linear(gr)))
            }
            ConvLayer::Deformable(p) => {
                let (gi, gr) = deform_conv2d_grads(x, p, g)?;
                Ok((gi, ConvLayerGrads::Deformable(gr)))
            }
        }
    }

    pub fn main(&self) -> &ConvParams {
        match self {
            ConvLayer::Linear(p) => p,
            ConvLayer::Deformable(p) => &p.main,
        }
    }
}

#[derive(Debug, Clone)]
enum ConvLayerGrads {
    Linear(ConvGrads),
    Deformable(DeformGrads),
}

impl ConvLayerGrads {
    fn add(&mut self, other: &ConvLayerGrads) {
        match (self, other) {
            (ConvLayerGrads::Linear(a), ConvLayerGrads::Linear(b)) => a.add(b),
            (ConvLayerGrads::Deformable(a), ConvLayerGrads::Deformable(b)) => a.add(b),
            _ => unreachable!("layer kinds are fixed by the config"),
        }
    }

    fn apply_to(&self, layer: &mut ConvLayer) {
        match (self, layer) {
            (ConvLayerGrads::Linear(g), ConvLayer::Linear(p)) => g.apply_to(p),
            (ConvLayerGrads::Deformable(g), ConvLayer::Deformable(p)) => g.apply_to(p),
            _ => unreachable!("layer kinds are fixed by the config"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub conv: ConvLayer,
    /// Absent on the final projection.
    pub bn: Option<BatchNormParams>,
}

/// All learnable state, shared by every pyramid level.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    pub layers: Vec<Layer>,
    /// Learned 2 -> 2 filter applied after the spline upsampler.
    pub head: ConvParams,
}

impl ModelParams {
    /// Cold-start initialization: fan-in uniform hidden layers, zero offset
    /// branches, a zero final projection and an identity head, so the model
    /// starts as the identity registration.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let last = config.channels.len() - 1;
        let mut layers = Vec::with_capacity(config.channels.len());
        for (i, &(cin, cout)) in config.channels.iter().enumerate() {
            let conv = if i == last {
                ConvLayer::Linear(ConvParams::zeros(cin, cout, config.kernel)?)
            } else if config.is_deformable(i) {
                ConvLayer::Deformable(DeformConvParams::new(cin, cout, config.kernel, &mut rng)?)
            } else {
                ConvLayer::Linear(ConvParams::fan_in_uniform(cin, cout, config.kernel, &mut rng)?)
            };
            let bn = if i == last {
                None
            } else {
                let mut bn = BatchNormParams::new(cout)?;
                bn.eps = config.bn_eps;
                bn.momentum = config.bn_momentum;
                Some(bn)
            };
            layers.push(Layer { conv, bn });
        }
        Ok(Self {
            head: ConvParams::identity(2, config.kernel)?,
            config,
            layers,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn set_config_kernels(&mut self, image: KernelKind, dvf: KernelKind) {
        self.config.image_warp_kernel = image;
        self.config.dvf_kernel = dvf;
    }

    pub fn set_mode(&mut self, mode: BnMode) {
        for l in &mut self.layers {
            if let Some(bn) = l.bn.as_mut() {
                bn.mode = mode;
            }
        }
    }

    /// Every learnable tensor with a stable name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            match &l.conv {
                ConvLayer::Linear(p) => {
                    out.push((format!("layer{i}.weight"), &p.weight));
                    out.push((format!("layer{i}.bias"), &p.bias));
                }
                ConvLayer::Deformable(p) => {
                    out.push((format!("layer{i}.weight"), &p.main.weight));
                    out.push((format!("layer{i}.bias"), &p.main.bias));
                    out.push((format!("layer{i}.offset.weight"), &p.offset.weight));
                    out.push((format!("layer{i}.offset.bias"), &p.offset.bias));
                }
            }
            if let Some(bn) = &l.bn {
                out.push((format!("layer{i}.bn.gamma"), &bn.gamma));
                out.push((format!("layer{i}.bn.beta"), &bn.beta));
            }
        }
        out.push(("head.weight".into(), &self.head.weight));
        out.push(("head.bias".into(), &self.head.bias));
        out
    }

    /// Mutable counterpart of [`ModelParams::named_tensors`], same order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            match &mut l.conv {
                ConvLayer::Linear(p) => {
                    out.push(&mut p.weight);
                    out.push(&mut p.bias);
                }
                ConvLayer::Deformable(p) => {
                    out.push(&mut p.main.weight);
                    out.push(&mut p.main.bias);
                    out.push(&mut p.offset.weight);
                    out.push(&mut p.offset.bias);
                }
            }
            if let Some(bn) = &mut l.bn {
                out.push(&mut bn.gamma);
                out.push(&mut bn.beta);
            }
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    /// Running batch-norm statistics as `(name, values)` pairs.
    pub fn named_running_stats(&self) -> Vec<(String, &Vec<f64>)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            if let Some(bn) = &l.bn {
                out.push((format!("layer{i}.bn.running_mean"), &bn.running_mean));
                out.push((format!("layer{i}.bn.running_var"), &bn.running_var));
            }
        }
        out
    }

    pub fn running_stats_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            if let Some(bn) = &mut l.bn {
                out.push(&mut bn.running_mean);
                out.push(&mut bn.running_var);
            }
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for t in self.tensors_mut() {
            t.zero_grad();
        }
    }

    /// Folds the batch statistics recorded during a training-mode forward pass
    /// into the running estimates.
    pub fn update_running_stats(&mut self, cache: &CwsCache) {
        for level in &cache.levels {
            for (layer, lc) in self.layers.iter_mut().zip(&level.net.layers) {
                if let (Some(bn), Some(bc)) = (layer.bn.as_mut(), lc.bn.as_ref()) {
                    bn.update_running(bc);
                }
            }
        }
    }
}

/// Per-level source and target images, level 0 finest.
#[derive(Debug, Clone, PartialEq)]
pub struct PyramidPair {
    pub source: Vec<Tensor>,
    pub target: Vec<Tensor>,
}

impl PyramidPair {
    pub fn new(source: &Tensor, target: &Tensor, levels: usize) -> Result<Self> {
        source.ensure_same_shape(target, "source and target")?;
        Ok(Self {
            source: build_pyramid(source, levels)?,
            target: build_pyramid(target, levels)?,
        })
    }

    pub fn levels(&self) -> usize {
        self.source.len()
    }
}

/// `levels` images, each a 2x2 mean pooling of the previous one.
pub fn build_pyramid(image: &Tensor, levels: usize) -> Result<Vec<Tensor>> {
    if levels == 0 {
        return Err(Error::Config("a pyramid needs at least one level".into()));
    }
    let div = 1usize << (levels - 1);
    if image.height() % div != 0 || image.width() % div != 0 {
        return Err(Error::Indivisible {
            height: image.height(),
            width: image.width(),
            divisor: div,
        });
    }
    let mut out = vec![image.clone()];
    for _ in 1..levels {
        let next = avgpool2(out.last().expect("non-empty"))?;
        out.push(next);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
struct LayerCache {
    /// Convolution input per batch element.
    input: Vec<Tensor>,
    bn: Option<BnCache>,
    /// Batch-norm output (ELU input) per element.
    pre_act: Vec<Tensor>,
}

/// Activations kept by a trunk forward pass.
#[derive(Debug, Clone)]
pub struct NetCache {
    layers: Vec<LayerCache>,
    pool_shape: Shape,
}

/// Convolutional trunk over a batch of 2-channel inputs; returns 2-channel
/// fields at half the input resolution.
pub fn ld_convnet_batch(inputs: &[Tensor], params: &ModelParams) -> Result<(Vec<Tensor>, NetCache)> {
    if inputs.is_empty() {
        return Err(Error::EmptyBatch);
    }
    for x in inputs {
        if x.channels() != 2 {
            return Err(Error::Shape(format!("trunk input must have 2 channels, got {}", x.shape())));
        }
        x.ensure_same_shape(&inputs[0], "batch element")?;
    }
    let mut caches = Vec::with_capacity(params.layers.len());
    let mut xs: Vec<Tensor> = inputs.to_vec();
    let mut pool_shape = inputs[0].shape();
    for (i, layer) in params.layers.iter().enumerate() {
        let z: Vec<Tensor> = xs
            .par_iter()
            .map(|x| layer.conv.forward(x))
            .collect::<Result<_>>()?;
        match &layer.bn {
            Some(bn) => {
                let (a, bc) = batchnorm_forward(&z, bn)?;
                let mut y: Vec<Tensor> = a.par_iter().map(elu).collect();
                if i == POOL_AFTER {
                    pool_shape = y[0].shape();
                    y = y.iter().map(avgpool2).collect::<Result<_>>()?;
                }
                caches.push(LayerCache {
                    input: std::mem::replace(&mut xs, y),
                    bn: Some(bc),
                    pre_act: a,
                });
            }
            None => {
                let mut y = z;
                if i == POOL_AFTER {
                    pool_shape = y[0].shape();
                    y = y.iter().map(avgpool2).collect::<Result<_>>()?;
                }
                caches.push(LayerCache {
                    input: std::mem::replace(&mut xs, y),
                    bn: None,
                    pre_act: Vec::new(),
                });
            }
        }
    }
    Ok((
        xs,
        NetCache {
            layers: caches,
            pool_shape,
        },
    ))
}

/// Single-input trunk pass; batch statistics come from this one input in
/// training mode.
pub fn ld_convnet(input: &Tensor, params: &ModelParams) -> Result<Dvf> {
    let (mut out, _) = ld_convnet_batch(std::slice::from_ref(input), params)?;
    Dvf::new(out.pop().expect("one output"))
}

#[derive(Debug, Clone)]
struct LayerGrads {
    conv: ConvLayerGrads,
    bn: Option<BnGrads>,
}

/// Parameter gradients of the whole model.
#[derive(Debug, Clone)]
pub struct ModelGrads {
    layers: Vec<Option<LayerGrads>>,
    head: Option<ConvGrads>,
}

impl ModelGrads {
    fn new(n_layers: usize) -> Self {
        Self {
            layers: vec![None; n_layers],
            head: None,
        }
    }

    fn add_conv(&mut self, i: usize, g: ConvLayerGrads) {
        match &mut self.layers[i] {
            Some(l) => l.conv.add(&g),
            slot @ None => *slot = Some(LayerGrads { conv: g, bn: None }),
        }
    }

    fn add_bn(&mut self, i: usize, g: BnGrads) {
        let l = self.layers[i].as_mut().expect("conv grads precede bn grads");
        match &mut l.bn {
            Some(b) => {
                for (a, v) in b.gamma.iter_mut().zip(&g.gamma) {
                    *a += v;
                }
                for (a, v) in b.beta.iter_mut().zip(&g.beta) {
                    *a += v;
                }
            }
            None => l.bn = Some(g),
        }
    }

    fn add_head(&mut self, g: &ConvGrads) {
        match &mut self.head {
            Some(h) => h.add(g),
            None => self.head = Some(g.clone()),
        }
    }

    /// Accumulates into the parameters' grad buffers.
    pub fn apply_to(&self, params: &mut ModelParams) {
        for (lg, layer) in self.layers.iter().zip(params.layers.iter_mut()) {
            if let Some(lg) = lg {
                lg.conv.apply_to(&mut layer.conv);
                if let (Some(g), Some(bn)) = (&lg.bn, layer.bn.as_mut()) {
                    bn.gamma.accumulate_grad(&g.gamma);
                    bn.beta.accumulate_grad(&g.beta);
                }
            }
        }
        if let Some(h) = &self.head {
            h.apply_to(&mut params.head);
        }
    }
}

fn reduce_conv_grads(parts: Vec<ConvLayerGrads>) -> ConvLayerGrads {
    let mut it = parts.into_iter();
    let mut acc = it.next().expect("non-empty batch");
    for g in it {
        acc.add(&g);
    }
    acc
}

fn ld_convnet_backward(
    cache: &NetCache,
    params: &ModelParams,
    grad_out: Vec<Tensor>,
    grads: &mut ModelGrads,
) -> Result<Vec<Tensor>> {
    let mut g = grad_out;
    for (i, (layer, lc)) in params.layers.iter().zip(&cache.layers).enumerate().rev() {
        if i == POOL_AFTER {
            g = g.iter().map(avgpool2_backward).collect();
            debug_assert_eq!(g[0].shape(), cache.pool_shape);
        }
        if let (Some(bn), Some(bc)) = (&layer.bn, &lc.bn) {
            let g_a: Vec<Tensor> = lc
                .pre_act
                .par_iter()
                .zip(g.par_iter())
                .map(|(a, gy)| elu_backward(a, gy))
                .collect();
            let (g_z, bg) = batchnorm_grads(bc, bn, &g_a)?;
            g = g_z;
            let (gi, cg): (Vec<Tensor>, Vec<ConvLayerGrads>) = lc
                .input
                .par_iter()
                .zip(g.par_iter())
                .map(|(x, gz)| layer.conv.grads(x, gz))
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .unzip();
            grads.add_conv(i, reduce_conv_grads(cg));
            grads.add_bn(i, bg);
            g = gi;
        } else {
            let (gi, cg): (Vec<Tensor>, Vec<ConvLayerGrads>) = lc
                .input
                .par_iter()
                .zip(g.par_iter())
                .map(|(x, gz)| layer.conv.grads(x, gz))
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .unzip();
            grads.add_conv(i, reduce_conv_grads(cg));
            g = gi;
        }
    }
    Ok(g)
}

/// Spline upsampling of a half-resolution field followed by the learned head.
pub fn nl_dvf_r(u_half: &Dvf, params: &ModelParams) -> Result<Dvf> {
    let up = upsample_dvf(u_half, params.config.dvf_kernel);
    Dvf::new(conv2d(up.tensor(), &params.head)?)
}

/// Warped source at one coarse level, used for that level's loss term.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelWarp {
    pub level: usize,
    pub warped: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CwsOutput {
    /// Accumulated field at level 0.
    pub u_final: Dvf,
    /// Residual predicted at level 0 (total field minus the upsampled input).
    pub residual_0: Dvf,
    pub warped_final: Tensor,
    /// Post-update warps for levels `L-1 ..= 1`, coarsest first.
    pub level_warps: Vec<LevelWarp>,
}

#[derive(Debug, Clone)]
struct LevelCache {
    level: usize,
    /// Field entering the level (zero at the coarsest).
    u_in: Vec<Dvf>,
    net: NetCache,
    /// Upsampled trunk output, the head's input.
    up: Vec<Dvf>,
    /// Field leaving the level.
    u_out: Vec<Dvf>,
}

/// Intermediates of a batched [`cws_forward_batch`].
#[derive(Debug, Clone)]
pub struct CwsCache {
    levels: Vec<LevelCache>,
}

fn check_pyramids(pyrs: &[PyramidPair], config: &ModelConfig) -> Result<()> {
    let first = pyrs.first().ok_or(Error::EmptyBatch)?;
    for p in pyrs {
        if p.levels() != config.levels || p.target.len() != config.levels {
            return Err(Error::Shape(format!(
                "pyramid has {} levels, model expects {}",
                p.levels(),
                config.levels
            )));
        }
        for (a, b) in p.source.iter().zip(&p.target) {
            a.ensure_same_shape(b, "pyramid level")?;
            if a.channels() != 1 {
                return Err(Error::Shape(format!("images must be single-channel, got {}", a.shape())));
            }
        }
        p.source[0].ensure_same_shape(&first.source[0], "batch element")?;
    }
    let coarse = &first.source[config.levels - 1];
    if coarse.height() % 2 != 0 || coarse.width() % 2 != 0 {
        return Err(Error::Indivisible {
            height: first.source[0].height(),
            width: first.source[0].width(),
            divisor: config.size_divisor(),
        });
    }
    Ok(())
}

/// Batched coarse-to-fine forward pass.
pub fn cws_forward_batch(pyrs: &[PyramidPair], params: &ModelParams) -> Result<(Vec<CwsOutput>, CwsCache)> {
    let config = &params.config;
    check_pyramids(pyrs, config)?;
    let levels = config.levels;
    let (img_k, dvf_k) = (config.image_warp_kernel, config.dvf_kernel);
    let top = &pyrs[0].source[levels - 1];
    let mut u: Vec<Dvf> = pyrs.iter().map(|_| Dvf::zeros(top.height(), top.width())).collect();
    let mut level_warps: Vec<Vec<LevelWarp>> = vec![Vec::new(); pyrs.len()];
    let mut caches = Vec::with_capacity(levels);
    let mut residual_0 = Vec::new();

    for l in (0..levels).rev() {
        let inputs: Vec<Tensor> = pyrs
            .par_iter()
            .zip(u.par_iter())
            .map(|(p, ui)| {
                let w = warp_image(&p.source[l], ui, img_k)?;
                Tensor::concat(&[&w, &p.target[l]])
            })
            .collect::<Result<_>>()?;
        let (half, net) = ld_convnet_batch(&inputs, params)?;
        drop(inputs);
        let up: Vec<Dvf> = half
            .into_par_iter()
            .map(|h| Ok(upsample_dvf(&Dvf::new(h)?, dvf_k)))
            .collect::<Result<_>>()?;
        let residual: Vec<Dvf> = up
            .par_iter()
            .map(|x| Dvf::new(conv2d(x.tensor(), &params.head)?))
            .collect::<Result<_>>()?;
        let u_out: Vec<Dvf> = u
            .iter()
            .zip(&residual)
            .map(|(a, r)| {
                let mut t = a.clone();
                t.tensor_mut().add_assign(r.tensor());
                t
            })
            .collect();
        if l > 0 {
            let warps: Vec<Tensor> = pyrs
                .par_iter()
                .zip(u_out.par_iter())
                .map(|(p, ui)| warp_image(&p.source[l], ui, img_k))
                .collect::<Result<_>>()?;
            for (lw, w) in level_warps.iter_mut().zip(warps) {
                lw.push(LevelWarp { level: l, warped: w });
            }
        } else {
            residual_0 = residual;
        }
        let u_in = std::mem::take(&mut u);
        u = if l > 0 {
            u_out.par_iter().map(|x| upsample_dvf(x, dvf_k)).collect()
        } else {
            u_out.clone()
        };
        caches.push(LevelCache {
            level: l,
            u_in,
            net,
            up,
            u_out,
        });
    }

    let outputs = pyrs
        .par_iter()
        .zip(u.into_par_iter())
        .zip(residual_0.into_par_iter())
        .zip(level_warps.into_par_iter())
        .map(|(((p, u_final), residual_0), level_warps)| {
            let warped_final = warp_image(&p.source[0], &u_final, img_k)?;
            Ok(CwsOutput {
                u_final,
                residual_0,
                warped_final,
                level_warps,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((outputs, CwsCache { levels: caches }))
}

pub fn cws_forward(pyr: &PyramidPair, params: &ModelParams) -> Result<CwsOutput> {
    let (mut out, _) = cws_forward_batch(std::slice::from_ref(pyr), params)?;
    Ok(out.pop().expect("one output"))
}

/// Reverse pass of [`cws_forward_batch`] given the loss gradients of each
/// output. Returns the parameter gradients without touching `params`.
pub fn cws_backward(
    cache: &CwsCache,
    pyrs: &[PyramidPair],
    outputs: &[CwsOutput],
    params: &ModelParams,
    out_grads: &[OutputGrads],
) -> Result<ModelGrads> {
    let config = &params.config;
    let (img_k, dvf_k) = (config.image_warp_kernel, config.dvf_kernel);
    let mut grads = ModelGrads::new(params.layers.len());

    // d loss / d u_out at level 0
    let mut g_u_out: Vec<Dvf> = pyrs
        .par_iter()
        .zip(outputs.par_iter())
        .zip(out_grads.par_iter())
        .map(|((p, o), g)| Ok(warp_image_backward(&p.source[0], &o.u_final, img_k, &g.warped_final)?.1))
        .collect::<Result<_>>()?;

    // caches are stored coarsest first
    for (ci, lc) in cache.levels.iter().enumerate().rev() {
        let l = lc.level;
        let g_res: Vec<Dvf> = g_u_out
            .iter()
            .zip(out_grads)
            .map(|(g, og)| {
                let mut r = g.clone();
                if l == 0 {
                    r.tensor_mut().add_assign(og.residual_0.tensor());
                }
                r
            })
            .collect();
        let head_and_trunk: Vec<(Tensor, ConvGrads)> = lc
            .up
            .par_iter()
            .zip(g_res.par_iter())
            .map(|(x, g)| {
                let (g_up, hg) = conv2d_grads(x.tensor(), &params.head, g.tensor())?;
                let g_half = upsample_dvf_backward(&Dvf::new(g_up)?, dvf_k);
                Ok((g_half.into_tensor(), hg))
            })
            .collect::<Result<_>>()?;
        let mut g_half = Vec::with_capacity(head_and_trunk.len());
        for (gh, hg) in head_and_trunk {
            grads.add_head(&hg);
            g_half.push(gh);
        }
        let g_in = ld_convnet_backward(&lc.net, params, g_half, &mut grads)?;

        let is_coarsest = ci == 0;
        if is_coarsest {
            break;
        }
        // gradient reaching u_in: identity path through the residual sum plus
        // the pre-warp of the source image
        let g_u_in: Vec<Dvf> = pyrs
            .par_iter()
            .zip(lc.u_in.par_iter())
            .zip(g_in.par_iter())
            .zip(g_u_out.par_iter())
            .map(|(((p, u_in), gx), gu)| {
                let g_w = gx.slice_channels(0, 1);
                let (_, g_from_warp) = warp_image_backward(&p.source[l], u_in, img_k, &g_w)?;
                let mut g = gu.clone();
                g.tensor_mut().add_assign(g_from_warp.tensor());
                Ok(g)
            })
            .collect::<Result<_>>()?;
        // u_in at level l is the upsampled u_out of level l + 1
        let coarser = &cache.levels[ci - 1];
        let lw_index = coarser_level_warp_index(outputs.first(), coarser.level)?;
        g_u_out = pyrs
            .par_iter()
            .zip(coarser.u_out.par_iter())
            .zip(g_u_in.par_iter())
            .zip(out_grads.par_iter())
            .map(|(((p, u_out), g), og)| {
                let mut gu = upsample_dvf_backward(g, dvf_k);
                let (_, g_lw) =
                    warp_image_backward(&p.source[coarser.level], u_out, img_k, &og.level_warps[lw_index])?;
                gu.tensor_mut().add_assign(g_lw.tensor());
                Ok(gu)
            })
            .collect::<Result<_>>()?;
    }
    Ok(grads)
}

fn coarser_level_warp_index(out: Option<&CwsOutput>, level: usize) -> Result<usize> {
    out.and_then(|o| o.level_warps.iter().position(|lw| lw.level == level))
        .ok_or_else(|| Error::Shape(format!("no level warp recorded for level {level}")))
}

/// Deterministic inference: batch norm in inference mode, one pair.
pub fn register(source: &Tensor, target: &Tensor, params: &ModelParams) -> Result<(Dvf, Tensor)> {
    let mut p = params.clone();
    p.set_mode(BnMode::Infer);
    let pyr = PyramidPair::new(source, target, p.config.levels)?;
    let out = cws_forward(&pyr, &p)?;
    Ok((out.u_final, out.warped_final))
}
