//! The sparse U-Net: configuration, parameters, forward/backward and training step.
//!
//! Encoder level `l` runs `blocks_per_level` submanifold blocks, then (except
//! at the deepest level) a stride-2 block. The decoder mirrors it: an inverse
//! block back onto the stored finer support, concatenation with the encoder
//! features of that level, then submanifold blocks. Every block is
//! conv → instance norm → LeakyReLU. An MLP head produces per-voxel logits.

mod checkpoint;
mod dense;
mod optim;

#[cfg(test)]
mod tests;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, NamedTensor, OptimSnapshot, CHECKPOINT_VERSION};
pub use dense::dense_reference_forward;
pub use optim::{AdamConfig, OptimState};

use crate::error::{Error, Result};
use crate::objective::{combined_loss, LossConfig};
use crate::real::Real;
use crate::sparse_nn::{
    conv_forward, instance_norm_forward, layer_backward, leaky_relu_train, mlp_head_train, split_channels,
    ConvParams, HeadParams, LayerCache, LayerKind, LayerRef, NormParams,
};
use crate::voxgrid::{
    build_coord_index, build_downsample, build_rulebook_subm, transpose_rulebook, KernelSpec, Rulebook, SparseTensor,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UNetConfig {
    pub levels: usize,
    pub base_widths: Vec<usize>,
    pub width_factor: f64,
    pub blocks_per_level: usize,
    pub classes: usize,
    pub leaky_slope: f64,
    pub norm_eps: f64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            levels: 4,
            base_widths: vec![4, 8, 16, 32],
            width_factor: 4.0,
            blocks_per_level: 2,
            classes: 4,
            leaky_slope: 0.01,
            norm_eps: 1e-5,
        }
    }
}

impl UNetConfig {
    /// Effective channel count per level: `round(base · width_factor)`.
    pub fn channels(&self) -> Vec<usize> {
        self.base_widths.iter().map(|&b| (b as f64 * self.width_factor).round() as usize).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.levels < 2 {
            return bad(format!("need at least 2 levels, got {}", self.levels));
        }
        if self.base_widths.len() != self.levels {
            return bad(format!("{} base widths for {} levels", self.base_widths.len(), self.levels));
        }
        if self.base_widths.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("base widths {:?} must be strictly increasing", self.base_widths));
        }
        if !(self.width_factor > 0.0) || self.channels().contains(&0) {
            return bad(format!("width factor {} yields an empty level", self.width_factor));
        }
        if self.blocks_per_level == 0 {
            return bad("need at least one block per level".into());
        }
        if self.classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.classes));
        }
        if !(self.norm_eps > 0.0) {
            return bad("norm eps must be positive".into());
        }
        Ok(())
    }

    /// Canonical `(name, shape)` of every parameter tensor, in storage order.
    pub fn parameter_layout(&self) -> Vec<(String, Vec<usize>)> {
        let ch = self.channels();
        let levels = self.levels;
        let mut out = Vec::new();
        let block = |out: &mut Vec<(String, Vec<usize>)>, prefix: String, volume: usize, cin: usize, cout: usize| {
            out.push((format!("{prefix}.conv.weight"), vec![volume, cin, cout]));
            out.push((format!("{prefix}.norm.gamma"), vec![cout]));
            out.push((format!("{prefix}.norm.beta"), vec![cout]));
        };
        for l in 0..levels {
            for b in 0..self.blocks_per_level {
                let cin = match (l, b) {
                    (0, 0) => 1,
                    _ => ch[l],
                };
                block(&mut out, format!("enc{l}.block{b}"), 27, cin, ch[l]);
            }
            if l + 1 < levels {
                block(&mut out, format!("down{l}"), 8, ch[l], ch[l + 1]);
            }
        }
        for l in (0..levels - 1).rev() {
            block(&mut out, format!("up{l}"), 8, ch[l + 1], ch[l]);
            for b in 0..self.blocks_per_level {
                let cin = if b == 0 { 2 * ch[l] } else { ch[l] };
                block(&mut out, format!("dec{l}.block{b}"), 27, cin, ch[l]);
            }
        }
        let (c, k) = (ch[0], self.classes);
        out.push(("head.fc1.weight".into(), vec![c, c]));
        out.push(("head.fc1.bias".into(), vec![c]));
        out.push(("head.fc2.weight".into(), vec![c, k]));
        out.push(("head.fc2.bias".into(), vec![k]));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.parameter_layout().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

/// Convolution followed by instance norm and LeakyReLU. Convolutions carry no
/// bias: the norm's mean subtraction would cancel it.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock<T> {
    pub conv: ConvParams<T>,
    pub norm: NormParams<T>,
}

impl<T: Real> ConvBlock<T> {
    fn zeros(volume: usize, cin: usize, cout: usize, eps: T) -> Self {
        Self { conv: ConvParams::zeros(volume, cin, cout, false), norm: NormParams::identity(cout, eps) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UNet<T> {
    config: UNetConfig,
    pub encoder: Vec<Vec<ConvBlock<T>>>,
    pub down: Vec<ConvBlock<T>>,
    pub up: Vec<ConvBlock<T>>,
    pub decoder: Vec<Vec<ConvBlock<T>>>,
    pub head: HeadParams<T>,
}

struct BlockCache<T> {
    conv: LayerCache<T>,
    norm: LayerCache<T>,
    act: LayerCache<T>,
}

/// Saved forward state of one training-mode pass.
pub struct ForwardTrace<T> {
    encoder: Vec<Vec<BlockCache<T>>>,
    down: Vec<BlockCache<T>>,
    up: Vec<BlockCache<T>>,
    decoder: Vec<Vec<BlockCache<T>>>,
    head: LayerCache<T>,
}

/// Rulebooks of every level for one input support.
struct Pyramid {
    subm: Vec<Arc<Rulebook>>,
    down: Vec<Arc<Rulebook>>,
    up: Vec<Arc<Rulebook>>,
}

impl Pyramid {
    fn build(coords: &[crate::voxgrid::VoxelCoord], levels: usize) -> Result<Self> {
        let kernel = KernelSpec::submanifold(3)?;
        let down_kernel = KernelSpec::downsample();
        let mut subm = Vec::with_capacity(levels);
        let mut down = Vec::with_capacity(levels - 1);
        let mut up = Vec::with_capacity(levels - 1);
        let mut current = coords.to_vec();
        for l in 0..levels {
            let index = build_coord_index(&current)?;
            subm.push(Arc::new(build_rulebook_subm(&current, &index, &kernel)?));
            if l + 1 < levels {
                let (coarse, rb) = build_downsample(&current, &down_kernel)?;
                up.push(Arc::new(transpose_rulebook(&rb, &current)?));
                down.push(Arc::new(rb));
                current = coarse;
            }
        }
        Ok(Self { subm, down, up })
    }
}

fn block_forward<T: Real>(
    block: &ConvBlock<T>,
    kind: LayerKind,
    st: &SparseTensor<T>,
    rb: &Arc<Rulebook>,
    slope: T,
    training: bool,
) -> Result<(SparseTensor<T>, Option<BlockCache<T>>)> {
    let (h, conv) = conv_forward(kind, st, rb, &block.conv, training)?;
    let (h, norm) = instance_norm_forward(&h, &block.norm, training)?;
    let (h, act) = leaky_relu_train(&h, slope, training)?;
    let cache = match (conv, norm, act) {
        (Some(conv), Some(norm), Some(act)) => Some(BlockCache { conv, norm, act }),
        _ => None,
    };
    Ok((h, cache))
}

fn accumulate<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

fn block_backward<T: Real>(
    block: &ConvBlock<T>,
    kind: LayerKind,
    cache: &BlockCache<T>,
    upstream: &[T],
    slope: T,
    grads: &mut ConvBlock<T>,
) -> Result<Vec<T>> {
    let g = layer_backward(LayerKind::LeakyRelu, LayerRef::LeakyRelu { slope }, Some(&cache.act), upstream)?;
    let g = layer_backward(LayerKind::InstanceNorm, LayerRef::Norm(&block.norm), Some(&cache.norm), &g.input)?;
    accumulate(&mut grads.norm.gamma, &g.params[0]);
    accumulate(&mut grads.norm.beta, &g.params[1]);
    let g = layer_backward(kind, LayerRef::Conv(&block.conv), Some(&cache.conv), &g.input)?;
    accumulate(&mut grads.conv.weights, &g.params[0]);
    Ok(g.input)
}

impl<T: Real> UNet<T> {
    /// All-zero weights, unit gamma, zero beta.
    pub fn zeros(config: &UNetConfig) -> Result<Self> {
        config.validate()?;
        let ch = config.channels();
        let levels = config.levels;
        let eps = T::from_f64_lossy(config.norm_eps);
        let encoder = (0..levels)
            .map(|l| {
                (0..config.blocks_per_level)
                    .map(|b| ConvBlock::zeros(27, if l == 0 && b == 0 { 1 } else { ch[l] }, ch[l], eps))
                    .collect()
            })
            .collect();
        let down = (0..levels - 1).map(|l| ConvBlock::zeros(8, ch[l], ch[l + 1], eps)).collect();
        let up = (0..levels - 1).map(|l| ConvBlock::zeros(8, ch[l + 1], ch[l], eps)).collect();
        let decoder = (0..levels - 1)
            .map(|l| {
                (0..config.blocks_per_level)
                    .map(|b| ConvBlock::zeros(27, if b == 0 { 2 * ch[l] } else { ch[l] }, ch[l], eps))
                    .collect()
            })
            .collect();
        let head = HeadParams::zeros(ch[0], config.classes, T::from_f64_lossy(config.leaky_slope));
        Ok(Self { config: config.clone(), encoder, down, up, decoder, head })
    }

    /// Gradient accumulator of the same shape: every tensor zero.
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for slot in out.slots_mut() {
            slot.iter_mut().for_each(|v| *v = T::zero());
        }
        out
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    fn slope(&self) -> T {
        T::from_f64_lossy(self.config.leaky_slope)
    }

    /// Parameter tensors in [`UNetConfig::parameter_layout`] order.
    pub fn slots(&self) -> Vec<&Vec<T>> {
        let mut out = Vec::new();
        for l in 0..self.config.levels {
            for b in &self.encoder[l] {
                out.extend([&b.conv.weights, &b.norm.gamma, &b.norm.beta]);
            }
            if let Some(d) = self.down.get(l) {
                out.extend([&d.conv.weights, &d.norm.gamma, &d.norm.beta]);
            }
        }
        for l in (0..self.config.levels - 1).rev() {
            let u = &self.up[l];
            out.extend([&u.conv.weights, &u.norm.gamma, &u.norm.beta]);
            for b in &self.decoder[l] {
                out.extend([&b.conv.weights, &b.norm.gamma, &b.norm.beta]);
            }
        }
        out.extend([&self.head.w1, &self.head.b1, &self.head.w2, &self.head.b2]);
        out
    }

    pub fn slots_mut(&mut self) -> Vec<&mut Vec<T>> {
        let levels = self.config.levels;
        let mut out = Vec::new();
        let mut encoder = self.encoder.iter_mut();
        let mut down = self.down.iter_mut();
        for _ in 0..levels {
            for b in encoder.next().expect("one encoder entry per level") {
                out.extend([&mut b.conv.weights, &mut b.norm.gamma, &mut b.norm.beta]);
            }
            if let Some(d) = down.next() {
                out.extend([&mut d.conv.weights, &mut d.norm.gamma, &mut d.norm.beta]);
            }
        }
        for (u, dec) in self.up.iter_mut().zip(self.decoder.iter_mut()).rev() {
            out.extend([&mut u.conv.weights, &mut u.norm.gamma, &mut u.norm.beta]);
            for b in dec {
                out.extend([&mut b.conv.weights, &mut b.norm.gamma, &mut b.norm.beta]);
            }
        }
        out.extend([&mut self.head.w1, &mut self.head.b1, &mut self.head.w2, &mut self.head.b2]);
        out
    }

    pub fn cast<U: Real>(&self) -> UNet<U> {
        let mut out = UNet::<U>::zeros(&self.config).expect("config already validated");
        for (dst, src) in out.slots_mut().into_iter().zip(self.slots()) {
            *dst = src.iter().map(|v| U::from_f64_lossy(v.to_f64_lossy())).collect();
        }
        out
    }

    /// Runs the network. Logits share the input's coordinate list.
    pub fn forward(&self, st: &SparseTensor<T>, training: bool) -> Result<(SparseTensor<T>, Option<ForwardTrace<T>>)> {
        if st.is_empty() {
            return Err(Error::EmptyTensor);
        }
        if st.channels() != 1 {
            return Err(Error::ShapeMismatch(format!("network input needs 1 channel, got {}", st.channels())));
        }
        let levels = self.config.levels;
        let slope = self.slope();
        let pyramid = Pyramid::build(st.coords(), levels)?;
        // Re-share the input on the pyramid's support so rulebook checks are pointer comparisons.
        let mut h = SparseTensor::from_shared(pyramid.subm[0].in_coords().clone(), st.features().to_vec(), 1)?;

        let mut enc_caches = Vec::with_capacity(levels);
        let mut down_caches = Vec::with_capacity(levels - 1);
        let mut skips = Vec::with_capacity(levels - 1);
        for l in 0..levels {
            let mut caches = Vec::new();
            for block in &self.encoder[l] {
                let (out, cache) = block_forward(block, LayerKind::SubmConv, &h, &pyramid.subm[l], slope, training)?;
                h = out;
                caches.extend(cache);
            }
            enc_caches.push(caches);
            if l + 1 < levels {
                let (out, cache) =
                    block_forward(&self.down[l], LayerKind::StridedConv, &h, &pyramid.down[l], slope, training)?;
                skips.push(std::mem::replace(&mut h, out));
                down_caches.extend(cache);
            }
        }

        let mut up_caches: Vec<Option<BlockCache<T>>> = (0..levels - 1).map(|_| None).collect();
        let mut dec_caches: Vec<Vec<BlockCache<T>>> = (0..levels - 1).map(|_| Vec::new()).collect();
        for l in (0..levels - 1).rev() {
            let (out, cache) = block_forward(&self.up[l], LayerKind::InverseConv, &h, &pyramid.up[l], slope, training)?;
            up_caches[l] = cache;
            h = crate::sparse_nn::concat_skip(&out, &skips[l])?;
            for block in &self.decoder[l] {
                let (out, cache) = block_forward(block, LayerKind::SubmConv, &h, &pyramid.subm[l], slope, training)?;
                h = out;
                dec_caches[l].extend(cache);
            }
        }
        let (logits, head_cache) = mlp_head_train(&h, &self.head, training)?;
        let logits = SparseTensor::from_shared(st.shared_coords().clone(), logits.into_features(), self.config.classes)?;

        let trace = match head_cache {
            Some(head) if training => Some(ForwardTrace {
                encoder: enc_caches,
                down: down_caches,
                up: up_caches.into_iter().map(|c| c.expect("training caches every block")).collect(),
                decoder: dec_caches,
                head,
            }),
            _ => None,
        };
        Ok((logits, trace))
    }

    /// Inference-mode forward returning `N×K` logits.
    pub fn predict_logits(&self, st: &SparseTensor<T>) -> Result<SparseTensor<T>> {
        self.forward(st, false).map(|(l, _)| l)
    }

    /// Gradients of every parameter given `∂L/∂logits`.
    pub fn backward(&self, trace: &ForwardTrace<T>, d_logits: &[T]) -> Result<UNet<T>> {
        let levels = self.config.levels;
        let slope = self.slope();
        let ch = self.config.channels();
        let mut grads = self.zeros_like();

        let g = layer_backward(LayerKind::MlpHead, LayerRef::MlpHead(&self.head), Some(&trace.head), d_logits)?;
        for (dst, src) in [&mut grads.head.w1, &mut grads.head.b1, &mut grads.head.w2, &mut grads.head.b2]
            .into_iter()
            .zip(&g.params)
        {
            accumulate(dst, src);
        }
        let mut g = g.input;

        let mut skip_grads = Vec::with_capacity(levels - 1);
        for l in 0..levels - 1 {
            for (b, cache) in trace.decoder[l].iter().enumerate().rev() {
                g = block_backward(&self.decoder[l][b], LayerKind::SubmConv, cache, &g, slope, &mut grads.decoder[l][b])?;
            }
            let (g_up, g_skip) = split_channels(&g, ch[l], ch[l]);
            skip_grads.push(g_skip);
            g = block_backward(&self.up[l], LayerKind::InverseConv, &trace.up[l], &g_up, slope, &mut grads.up[l])?;
        }

        for l in (0..levels).rev() {
            if l + 1 < levels {
                accumulate(&mut g, &skip_grads[l]);
            }
            for (b, cache) in trace.encoder[l].iter().enumerate().rev() {
                g = block_backward(&self.encoder[l][b], LayerKind::SubmConv, cache, &g, slope, &mut grads.encoder[l][b])?;
            }
            if l > 0 {
                g = block_backward(
                    &self.down[l - 1],
                    LayerKind::StridedConv,
                    &trace.down[l - 1],
                    &g,
                    slope,
                    &mut grads.down[l - 1],
                )?;
            }
        }
        Ok(grads)
    }
}

/// Samples `len` values from `Normal(0, 2/fan_in)`.
pub fn he_normal(len: usize, fan_in: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    (0..len).map(|_| normal.sample(rng)).collect()
}

/// Deterministic initialization from a ChaCha8 stream seeded with `seed`.
///
/// Weight tensors are drawn in parameter-layout order; biases, gamma and beta
/// take their constant values without consuming randomness.
pub fn init_network<T: Real>(config: &UNetConfig, seed: u64) -> Result<UNet<T>> {
    let mut net = UNet::<T>::zeros(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layout = config.parameter_layout();
    for ((name, shape), slot) in layout.iter().zip(net.slots_mut()) {
        if name.ends_with(".weight") {
            let fan_in = shape[..shape.len() - 1].iter().product();
            *slot = he_normal(slot.len(), fan_in, &mut rng).into_iter().map(T::from_f64_lossy).collect();
        }
    }
    Ok(net)
}

/// One optimization step on a labeled window; returns the loss before the update.
pub fn train_step<T: Real>(
    net: &mut UNet<T>,
    opt: &mut OptimState<T>,
    window: &SparseTensor<T>,
    loss: &LossConfig,
) -> Result<f64> {
    let labels = window
        .labels()
        .ok_or_else(|| Error::ShapeMismatch("training window carries no labels".into()))?;
    if loss.classes != net.config.classes {
        return Err(Error::InvalidConfig(format!(
            "loss has {} classes, network {}",
            loss.classes, net.config.classes
        )));
    }
    let (logits, trace) = net.forward(window, true)?;
    let trace = trace.expect("training forward returns a trace");
    let (value, d_logits) = combined_loss(logits.features(), labels, loss)?;
    let grads = net.backward(&trace, &d_logits)?;
    opt.update(net, &grads)?;
    Ok(value)
}
