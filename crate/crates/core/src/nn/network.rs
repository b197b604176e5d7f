//! Extended-2D U-Net.
//!
//! Each encoder level is a double 3×3 convolution block (conv → BN → ReLU,
//! twice) whose output is summed with a 1×1 projection of the block input,
//! followed by 2×2 max pooling. The decoder upsamples with 2×2 stride-2
//! transposed convolutions, concatenates the matching encoder output
//! (skip first, then upsampled) and applies the same block. A 1×1 head with
//! bias and a sigmoid produce the probability map.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ops::{self, Act, BnCache};
use super::tensor::{Tensor, Tensor4};
use crate::error::{Error, Result};

/// Smallest and largest probability the network reports.
pub const PROB_FLOOR: f32 = 1e-7;
pub const PROB_CEIL: f32 = 1.0 - 1e-7;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub in_channels: usize,
    pub base_width: usize,
    pub depth: usize,
    pub use_residual: bool,
    pub use_batchnorm: bool,
    pub e2d: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            in_channels: 3,
            base_width: 64,
            depth: 4,
            use_residual: true,
            use_batchnorm: true,
            e2d: true,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config("network depth must be at least 1".into()));
        }
        if self.base_width == 0 {
            return Err(Error::Config("base_width must be positive".into()));
        }
        let expected = if self.e2d { 3 } else { 1 };
        if self.in_channels != expected {
            return Err(Error::Config(format!(
                "e2d={} requires in_channels={expected}, got {}",
                self.e2d, self.in_channels
            )));
        }
        if self.base_width.checked_shl(self.depth as u32).is_none() || self.depth > 12 {
            return Err(Error::Config(format!("depth {} is too large", self.depth)));
        }
        Ok(())
    }

    /// Channel count at encoder level `level`; `level == depth` is the bottleneck.
    pub fn width(&self, level: usize) -> usize {
        self.base_width << level
    }

    /// Spatial dims must be divisible by this.
    pub fn divisor(&self) -> usize {
        1 << self.depth
    }

    pub fn check_input(&self, channels: usize, h: usize, w: usize) -> Result<()> {
        if channels != self.in_channels {
            return Err(Error::Shape(format!(
                "network expects {} input channels, got {channels}",
                self.in_channels
            )));
        }
        let d = self.divisor();
        if h == 0 || w == 0 || h % d != 0 || w % d != 0 {
            return Err(Error::Shape(format!(
                "input {h}×{w} is not divisible by 2^{} = {d}",
                self.depth
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

impl BatchNormParams {
    fn new(c: usize) -> Self {
        BatchNormParams {
            gamma: Tensor::filled(vec![c], 1.0),
            beta: Tensor::zeros(vec![c]),
            running_mean: Tensor::zeros(vec![c]),
            running_var: Tensor::filled(vec![c], 1.0),
        }
    }
}

/// Double-convolution block with optional batch norm and residual projection.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub conv1: Tensor,
    pub bn1: Option<BatchNormParams>,
    pub conv2: Tensor,
    pub bn2: Option<BatchNormParams>,
    pub proj: Option<Tensor>,
}

impl BlockParams {
    fn new(c_in: usize, c_out: usize, cfg: &NetworkConfig, rng: &mut impl Rng) -> Self {
        let bn = || cfg.use_batchnorm.then(|| BatchNormParams::new(c_out));
        BlockParams {
            conv1: kaiming(vec![c_out, c_in, 3, 3], c_in * 9, rng),
            bn1: bn(),
            conv2: kaiming(vec![c_out, c_out, 3, 3], c_out * 9, rng),
            bn2: bn(),
            proj: cfg
                .use_residual
                .then(|| kaiming(vec![c_out, c_in], c_in, rng)),
        }
    }

    pub fn c_in(&self) -> usize {
        self.conv1.shape[1]
    }

    pub fn c_out(&self) -> usize {
        self.conv1.shape[0]
    }
}

fn kaiming(shape: Vec<usize>, fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let std = (2.0 / fan_in as f32).sqrt();
    let normal = Normal::new(0.0f32, std).expect("finite std");
    let n = shape.iter().product();
    Tensor {
        shape,
        data: (0..n).map(|_| normal.sample(rng)).collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub config: NetworkConfig,
    pub encoder: Vec<BlockParams>,
    pub bottleneck: BlockParams,
    /// `up[l]` maps width(l+1) to width(l).
    pub up: Vec<Tensor>,
    /// `decoder[l]` maps 2·width(l) to width(l).
    pub decoder: Vec<BlockParams>,
    pub head_weight: Tensor,
    pub head_bias: Tensor,
}

/// A parameter or buffer reached by name.
pub struct NamedTensor<'a> {
    pub name: String,
    pub tensor: &'a Tensor,
    pub trainable: bool,
}

pub struct NamedTensorMut<'a> {
    pub name: String,
    pub tensor: &'a mut Tensor,
    pub trainable: bool,
}

fn push_bn<'a>(bn: &'a BatchNormParams, p: &str, out: &mut Vec<NamedTensor<'a>>) {
    out.push(named(format!("{p}.weight"), &bn.gamma, true));
    out.push(named(format!("{p}.bias"), &bn.beta, true));
    out.push(named(format!("{p}.running_mean"), &bn.running_mean, false));
    out.push(named(format!("{p}.running_var"), &bn.running_var, false));
}

fn push_block<'a>(b: &'a BlockParams, p: &str, out: &mut Vec<NamedTensor<'a>>) {
    out.push(named(format!("{p}.conv1.weight"), &b.conv1, true));
    if let Some(bn) = &b.bn1 {
        push_bn(bn, &format!("{p}.bn1"), out);
    }
    out.push(named(format!("{p}.conv2.weight"), &b.conv2, true));
    if let Some(bn) = &b.bn2 {
        push_bn(bn, &format!("{p}.bn2"), out);
    }
    if let Some(proj) = &b.proj {
        out.push(named(format!("{p}.proj.weight"), proj, true));
    }
}

fn push_bn_mut<'a>(bn: &'a mut BatchNormParams, p: &str, out: &mut Vec<NamedTensorMut<'a>>) {
    let BatchNormParams {
        gamma,
        beta,
        running_mean,
        running_var,
    } = bn;
    out.push(named_mut(format!("{p}.weight"), gamma, true));
    out.push(named_mut(format!("{p}.bias"), beta, true));
    out.push(named_mut(format!("{p}.running_mean"), running_mean, false));
    out.push(named_mut(format!("{p}.running_var"), running_var, false));
}

fn push_block_mut<'a>(b: &'a mut BlockParams, p: &str, out: &mut Vec<NamedTensorMut<'a>>) {
    let BlockParams {
        conv1,
        bn1,
        conv2,
        bn2,
        proj,
    } = b;
    out.push(named_mut(format!("{p}.conv1.weight"), conv1, true));
    if let Some(bn) = bn1 {
        push_bn_mut(bn, &format!("{p}.bn1"), out);
    }
    out.push(named_mut(format!("{p}.conv2.weight"), conv2, true));
    if let Some(bn) = bn2 {
        push_bn_mut(bn, &format!("{p}.bn2"), out);
    }
    if let Some(proj) = proj {
        out.push(named_mut(format!("{p}.proj.weight"), proj, true));
    }
}

fn named(name: String, tensor: &Tensor, trainable: bool) -> NamedTensor<'_> {
    NamedTensor {
        name,
        tensor,
        trainable,
    }
}

fn named_mut(name: String, tensor: &mut Tensor, trainable: bool) -> NamedTensorMut<'_> {
    NamedTensorMut {
        name,
        tensor,
        trainable,
    }
}

impl NetworkParams {
    /// Builds a freshly initialized network.
    pub fn build(config: &NetworkConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let depth = config.depth;
        let mut encoder = Vec::with_capacity(depth);
        let mut c_in = config.in_channels;
        for level in 0..depth {
            encoder.push(BlockParams::new(c_in, config.width(level), config, rng));
            c_in = config.width(level);
        }
        let bottleneck = BlockParams::new(c_in, config.width(depth), config, rng);
        let mut up = Vec::with_capacity(depth);
        let mut decoder = Vec::with_capacity(depth);
        for level in 0..depth {
            let (wide, narrow) = (config.width(level + 1), config.width(level));
            up.push(kaiming(vec![wide, narrow, 2, 2], wide, rng));
            decoder.push(BlockParams::new(2 * narrow, narrow, config, rng));
        }
        let b = config.base_width;
        Ok(NetworkParams {
            config: config.clone(),
            encoder,
            bottleneck,
            up,
            decoder,
            head_weight: kaiming(vec![1, b], b, rng).scaled(0.5f32.sqrt()),
            head_bias: Tensor::zeros(vec![1]),
        })
    }

    /// Same structure, every tensor zero. Used for gradients and momentum.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.named_tensors_mut() {
            t.tensor.data.iter_mut().for_each(|v| *v = 0.0);
        }
        z
    }

    /// All tensors under stable hierarchical names, in a fixed order.
    pub fn named_tensors(&self) -> Vec<NamedTensor<'_>> {
        let mut out = Vec::new();
        for (l, block) in self.encoder.iter().enumerate() {
            push_block(block, &format!("encoder.{l}"), &mut out);
        }
        push_block(&self.bottleneck, "bottleneck", &mut out);
        for (l, (up, block)) in self.up.iter().zip(&self.decoder).enumerate() {
            out.push(named(format!("up.{l}.weight"), up, true));
            push_block(block, &format!("decoder.{l}"), &mut out);
        }
        out.push(named("head.weight".into(), &self.head_weight, true));
        out.push(named("head.bias".into(), &self.head_bias, true));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<NamedTensorMut<'_>> {
        let mut out = Vec::new();
        let NetworkParams {
            encoder,
            bottleneck,
            up,
            decoder,
            head_weight,
            head_bias,
            ..
        } = self;
        for (l, block) in encoder.iter_mut().enumerate() {
            push_block_mut(block, &format!("encoder.{l}"), &mut out);
        }
        push_block_mut(bottleneck, "bottleneck", &mut out);
        for (l, (up, block)) in up.iter_mut().zip(decoder.iter_mut()).enumerate() {
            out.push(named_mut(format!("up.{l}.weight"), up, true));
            push_block_mut(block, &format!("decoder.{l}"), &mut out);
        }
        out.push(named_mut("head.weight".into(), head_weight, true));
        out.push(named_mut("head.bias".into(), head_bias, true));
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.named_tensors()
            .iter()
            .filter(|t| t.trainable)
            .map(|t| t.tensor.len())
            .sum()
    }

    /// Inference: batch statistics are replaced by running statistics.
    pub fn forward(&self, input: &Tensor4) -> Result<Tensor4> {
        let x = self.input_act(input)?;
        let (logits, _) = self.run(x, Mode::Eval);
        Ok(to_probabilities(&logits))
    }

    /// Training-mode forward pass; keeps everything backward needs.
    pub fn forward_train(&self, input: &Tensor4) -> Result<(Tensor4, ForwardCache)> {
        let x = self.input_act(input)?;
        let (logits, cache) = self.run(x, Mode::Train);
        let probs = to_probabilities(&logits);
        Ok((probs, cache.expect("training mode keeps a cache")))
    }

    fn input_act(&self, input: &Tensor4) -> Result<Act> {
        self.config.check_input(input.c, input.h, input.w)?;
        Ok(input.to_channel_major())
    }

    fn run(&self, x: Act, mode: Mode) -> (Act, Option<ForwardCache>) {
        let keep = mode == Mode::Train;
        let mut enc_caches = Vec::new();
        let mut skips = Vec::new();
        let mut pool_args = Vec::new();
        let mut cur = x;
        for block in &self.encoder {
            let (out, cache) = block_forward(block, cur, mode);
            let (pooled, arg) = ops::max_pool2(&out);
            if keep {
                enc_caches.push(cache.expect("train cache"));
                pool_args.push(arg);
            }
            skips.push(out);
            cur = pooled;
        }
        let (mut cur, bottleneck_cache) = block_forward(&self.bottleneck, cur, mode);
        let mut dec_caches = Vec::new();
        let mut up_inputs = Vec::new();
        for level in (0..self.config.depth).rev() {
            let narrow = self.config.width(level);
            let up = ops::up_conv2(&cur, &self.up[level].data, narrow);
            let cat = ops::concat(&skips[level], &up);
            if keep {
                up_inputs.push(cur);
            }
            let (out, cache) = block_forward(&self.decoder[level], cat, mode);
            if let Some(c) = cache {
                dec_caches.push(c);
            }
            cur = out;
        }
        let mut logits = ops::conv1x1(&cur, &self.head_weight.data, 1);
        let bias = self.head_bias.data[0];
        logits.data.iter_mut().for_each(|v| *v += bias);
        let cache = keep.then(|| ForwardCache {
            encoder: enc_caches,
            pool_args,
            skip_shapes: skips.iter().map(|s| (s.c, s.n, s.h, s.w)).collect(),
            bottleneck: bottleneck_cache.expect("train cache"),
            up_inputs,
            decoder: dec_caches,
            head_input: cur,
            logits: logits.clone(),
        });
        (logits, cache)
    }

    /// Backpropagates `d_probs` (gradient w.r.t. the sigmoid outputs).
    pub fn backward(&self, cache: &ForwardCache, d_probs: &Tensor4) -> NetworkParams {
        let mut grads = self.zeros_like();
        // sigmoid'
        let mut d_logits = Act {
            c: 1,
            n: d_probs.n,
            h: d_probs.h,
            w: d_probs.w,
            data: d_probs.data.clone(),
        };
        for (g, &z) in d_logits.data.iter_mut().zip(&cache.logits.data) {
            let p = ops::sigmoid(z);
            *g *= p * (1.0 - p);
        }
        grads.head_bias.data[0] = d_logits.data.iter().map(|&v| v as f64).sum::<f64>() as f32;
        let mut d = ops::conv1x1_backward(
            &cache.head_input,
            &self.head_weight.data,
            &d_logits,
            &mut grads.head_weight.data,
        );

        let depth = self.config.depth;
        let mut d_skips: Vec<Option<Act>> = (0..depth).map(|_| None).collect();
        // Decoder caches were pushed deepest level first.
        for i in (0..depth).rev() {
            let level = depth - 1 - i;
            let d_cat = block_backward(&self.decoder[level], &cache.decoder[i], d, &mut grads.decoder[level]);
            let skip_c = cache.skip_shapes[level].0;
            let (d_skip, d_up) = ops::split(&d_cat, skip_c);
            d_skips[level] = Some(d_skip);
            d = ops::up_conv2_backward(&cache.up_inputs[i], &self.up[level].data, &d_up, &mut grads.up[level].data);
        }
        let mut d = block_backward(&self.bottleneck, &cache.bottleneck, d, &mut grads.bottleneck);
        for level in (0..depth).rev() {
            let mut d_out = ops::max_pool2_backward(&d, &cache.pool_args[level], cache.skip_shapes[level]);
            ops::add_inplace(&mut d_out, d_skips[level].as_ref().expect("decoder visited every level"));
            d = block_backward(&self.encoder[level], &cache.encoder[level], d_out, &mut grads.encoder[level]);
        }
        grads
    }

    /// Folds the batch statistics of a training forward pass into the
    /// running statistics.
    pub fn update_running_stats(&mut self, cache: &ForwardCache) {
        let depth = self.config.depth;
        for (block, bc) in self.encoder.iter_mut().zip(&cache.encoder) {
            block_update_stats(block, bc);
        }
        block_update_stats(&mut self.bottleneck, &cache.bottleneck);
        for (i, level) in (0..depth).rev().enumerate() {
            block_update_stats(&mut self.decoder[level], &cache.decoder[i]);
        }
    }
}

fn to_probabilities(logits: &Act) -> Tensor4 {
    Tensor4 {
        n: logits.n,
        c: 1,
        h: logits.h,
        w: logits.w,
        data: logits
            .data
            .iter()
            .map(|&z| ops::sigmoid(z).clamp(PROB_FLOOR, PROB_CEIL))
            .collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
pub struct BlockCache {
    input: Act,
    bn1: Option<BnCache>,
    act1: Act,
    bn2: Option<BnCache>,
    act2: Act,
}

/// Intermediate values of a training forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    encoder: Vec<BlockCache>,
    pool_args: Vec<Vec<u32>>,
    skip_shapes: Vec<(usize, usize, usize, usize)>,
    bottleneck: BlockCache,
    up_inputs: Vec<Act>,
    decoder: Vec<BlockCache>,
    head_input: Act,
    logits: Act,
}

fn bn_forward(x: Act, bn: Option<&BatchNormParams>, mode: Mode) -> (Act, Option<BnCache>) {
    match (bn, mode) {
        (None, _) => (x, None),
        (Some(bn), Mode::Train) => {
            let (y, cache) = ops::batch_norm_train(&x, &bn.gamma.data, &bn.beta.data);
            (y, Some(cache))
        }
        (Some(bn), Mode::Eval) => (
            ops::batch_norm_eval(
                &x,
                &bn.gamma.data,
                &bn.beta.data,
                &bn.running_mean.data,
                &bn.running_var.data,
            ),
            None,
        ),
    }
}

fn block_forward(block: &BlockParams, x: Act, mode: Mode) -> (Act, Option<BlockCache>) {
    let c_out = block.c_out();
    let h = ops::conv3x3(&x, &block.conv1.data, c_out);
    let (mut a1, bn1) = bn_forward(h, block.bn1.as_ref(), mode);
    ops::relu_inplace(&mut a1);
    let h = ops::conv3x3(&a1, &block.conv2.data, c_out);
    let (mut a2, bn2) = bn_forward(h, block.bn2.as_ref(), mode);
    ops::relu_inplace(&mut a2);
    let mut out = a2.clone();
    if let Some(proj) = &block.proj {
        ops::add_inplace(&mut out, &ops::conv1x1(&x, &proj.data, c_out));
    }
    let cache = (mode == Mode::Train).then(|| BlockCache {
        input: x,
        bn1,
        act1: a1,
        bn2,
        act2: a2,
    });
    (out, cache)
}

fn block_backward(block: &BlockParams, cache: &BlockCache, d_out: Act, grads: &mut BlockParams) -> Act {
    let mut dx_res = None;
    if let (Some(proj), Some(gproj)) = (&block.proj, grads.proj.as_mut()) {
        dx_res = Some(ops::conv1x1_backward(&cache.input, &proj.data, &d_out, &mut gproj.data));
    }
    let mut d = d_out;
    ops::relu_backward_inplace(&mut d, &cache.act2);
    if let (Some(bn), Some(bc), Some(gbn)) = (&block.bn2, &cache.bn2, grads.bn2.as_mut()) {
        d = ops::batch_norm_backward(&d, bc, &bn.gamma.data, &mut gbn.gamma.data, &mut gbn.beta.data);
    }
    let mut d = ops::conv3x3_backward(&cache.act1, &block.conv2.data, &d, &mut grads.conv2.data);
    ops::relu_backward_inplace(&mut d, &cache.act1);
    if let (Some(bn), Some(bc), Some(gbn)) = (&block.bn1, &cache.bn1, grads.bn1.as_mut()) {
        d = ops::batch_norm_backward(&d, bc, &bn.gamma.data, &mut gbn.gamma.data, &mut gbn.beta.data);
    }
    let mut dx = ops::conv3x3_backward(&cache.input, &block.conv1.data, &d, &mut grads.conv1.data);
    if let Some(r) = dx_res {
        ops::add_inplace(&mut dx, &r);
    }
    dx
}

fn block_update_stats(block: &mut BlockParams, cache: &BlockCache) {
    let pairs = [(block.bn1.as_mut(), cache.bn1.as_ref()), (block.bn2.as_mut(), cache.bn2.as_ref())];
    for (bn, bc) in pairs {
        if let (Some(bn), Some(bc)) = (bn, bc) {
            let m = ops::BN_MOMENTUM;
            for (r, &v) in bn.running_mean.data.iter_mut().zip(&bc.mean) {
                *r = (1.0 - m) * *r + m * v;
            }
            for (r, &v) in bn.running_var.data.iter_mut().zip(&bc.var_unbiased) {
                *r = (1.0 - m) * *r + m * v;
            }
        }
    }
}

/// Runs a single block on `x` in inference mode. Exposed for inspection.
pub fn block_output(block: &BlockParams, x: &Tensor4) -> Tensor4 {
    let (out, _) = block_forward(block, x.to_channel_major(), Mode::Eval);
    Tensor4::from_channel_major(&out)
}

/// Same as [`block_output`] but normalizing with batch statistics.
pub fn block_output_train(block: &BlockParams, x: &Tensor4) -> Tensor4 {
    let (out, _) = block_forward(block, x.to_channel_major(), Mode::Train);
    Tensor4::from_channel_major(&out)
}
