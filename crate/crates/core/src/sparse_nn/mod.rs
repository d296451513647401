//! Forward and backward passes of the sparse U-Net layers.
//!
//! Forward functions with a `training` flag return a [`LayerCache`] holding
//! what [`layer_backward`] needs. Layers are pure functions of
//! `(tensor, rulebook, params)`.

mod conv;
mod head;
mod norm;

#[cfg(test)]
mod tests;

use std::sync::Arc;

pub use conv::{conv_forward, inverse_conv_forward, strided_conv_forward, subm_conv_forward, ConvParams};
pub use head::{mlp_head_forward, mlp_head_train, HeadParams};
pub use norm::{instance_norm_forward, sparse_instance_norm, NormParams, DEFAULT_NORM_EPS};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::voxgrid::{Rulebook, SparseTensor};

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    SubmConv,
    StridedConv,
    InverseConv,
    InstanceNorm,
    LeakyRelu,
    MlpHead,
}

impl LayerKind {
    fn name(self) -> &'static str {
        match self {
            LayerKind::SubmConv => "submanifold conv",
            LayerKind::StridedConv => "strided conv",
            LayerKind::InverseConv => "inverse conv",
            LayerKind::InstanceNorm => "instance norm",
            LayerKind::LeakyRelu => "leaky relu",
            LayerKind::MlpHead => "mlp head",
        }
    }
}

/// Forward-pass state saved for the backward pass.
#[derive(Debug, Clone)]
pub enum LayerCache<T> {
    Conv { kind: LayerKind, input: Vec<T>, rulebook: Arc<Rulebook> },
    Norm { normalized: Vec<T>, inv_std: Vec<T> },
    LeakyRelu { input: Vec<T> },
    MlpHead { input: Vec<T>, hidden: Vec<T> },
}

impl<T> LayerCache<T> {
    fn kind(&self) -> LayerKind {
        match self {
            LayerCache::Conv { kind, .. } => *kind,
            LayerCache::Norm { .. } => LayerKind::InstanceNorm,
            LayerCache::LeakyRelu { .. } => LayerKind::LeakyRelu,
            LayerCache::MlpHead { .. } => LayerKind::MlpHead,
        }
    }
}

/// Parameters of the layer being differentiated.
#[derive(Debug, Clone, Copy)]
pub enum LayerRef<'a, T> {
    Conv(&'a ConvParams<T>),
    Norm(&'a NormParams<T>),
    LeakyRelu { slope: T },
    MlpHead(&'a HeadParams<T>),
}

/// Gradient w.r.t. the layer input plus one gradient per parameter tensor.
///
/// Parameter order: conv `[weights, bias?]`, norm `[gamma, beta]`,
/// head `[w1, b1, w2, b2]`, leaky relu `[]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads<T> {
    pub input: Vec<T>,
    pub params: Vec<Vec<T>>,
}

pub fn layer_backward<T: Real>(
    kind: LayerKind,
    layer: LayerRef<'_, T>,
    cache: Option<&LayerCache<T>>,
    upstream: &[T],
) -> Result<LayerGrads<T>> {
    let cache = cache.filter(|c| c.kind() == kind).ok_or(Error::MissingCache(kind.name()))?;
    match (layer, cache) {
        (LayerRef::Conv(p), LayerCache::Conv { input, rulebook, .. }) => {
            check_upstream(upstream, rulebook.out_count() * p.out_channels)?;
            let (d_input, d_weights) =
                conv::conv_backward_core(input, rulebook, &p.weights, p.in_channels, p.out_channels, upstream);
            let mut params = vec![d_weights];
            if p.bias.is_some() {
                params.push(conv::column_sums(upstream, p.out_channels));
            }
            Ok(LayerGrads { input: d_input, params })
        }
        (LayerRef::Norm(p), LayerCache::Norm { normalized, inv_std }) => {
            check_upstream(upstream, normalized.len())?;
            let (d_input, d_gamma, d_beta) = norm::instance_norm_backward(p, normalized, inv_std, upstream);
            Ok(LayerGrads { input: d_input, params: vec![d_gamma, d_beta] })
        }
        (LayerRef::LeakyRelu { slope }, LayerCache::LeakyRelu { input }) => {
            check_upstream(upstream, input.len())?;
            let d_input = input.iter().zip(upstream).map(|(&x, &g)| g * leaky_grad(x, slope)).collect();
            Ok(LayerGrads { input: d_input, params: Vec::new() })
        }
        (LayerRef::MlpHead(p), LayerCache::MlpHead { input, hidden }) => {
            check_upstream(upstream, input.len() / p.channels * p.classes)?;
            let (d_input, params) = head::mlp_head_backward(p, input, hidden, upstream);
            Ok(LayerGrads { input: d_input, params })
        }
        _ => Err(Error::MissingCache(kind.name())),
    }
}

fn check_upstream<T>(upstream: &[T], expected: usize) -> Result<()> {
    if upstream.len() != expected {
        return Err(Error::ShapeMismatch(format!(
            "upstream gradient has {} values, expected {expected}",
            upstream.len()
        )));
    }
    Ok(())
}

#[inline]
pub(crate) fn leaky<T: Real>(x: T, slope: T) -> T {
    if x >= T::zero() {
        x
    } else {
        slope * x
    }
}

#[inline]
pub(crate) fn leaky_grad<T: Real>(x: T, slope: T) -> T {
    if x >= T::zero() {
        T::one()
    } else {
        slope
    }
}

pub fn leaky_relu_train<T: Real>(
    st: &SparseTensor<T>,
    slope: T,
    training: bool,
) -> Result<(SparseTensor<T>, Option<LayerCache<T>>)> {
    let out = st.features().iter().map(|&x| leaky(x, slope)).collect();
    let out = st.with_features(out, st.channels())?;
    let cache = training.then(|| LayerCache::LeakyRelu { input: st.features().to_vec() });
    Ok((out, cache))
}

/// Elementwise `x ↦ x` for `x ≥ 0`, `slope·x` otherwise.
pub fn leaky_relu<T: Real>(st: &SparseTensor<T>, slope: T) -> Result<SparseTensor<T>> {
    leaky_relu_train(st, slope, false).map(|(o, _)| o)
}

/// Channelwise concatenation `[decoder | encoder]` on a shared support.
pub fn concat_skip<T: Real>(decoder: &SparseTensor<T>, encoder: &SparseTensor<T>) -> Result<SparseTensor<T>> {
    let same = Arc::ptr_eq(decoder.shared_coords(), encoder.shared_coords()) || decoder.coords() == encoder.coords();
    if !same {
        return Err(Error::SupportMismatch);
    }
    let (cd, ce) = (decoder.channels(), encoder.channels());
    let mut features = Vec::with_capacity(decoder.len() * (cd + ce));
    for i in 0..decoder.len() {
        features.extend_from_slice(decoder.row(i));
        features.extend_from_slice(encoder.row(i));
    }
    decoder.with_features(features, cd + ce)
}

/// Splits row-major `N×(a+b)` values into `N×a` and `N×b`.
pub fn split_channels<T: Copy>(values: &[T], a: usize, b: usize) -> (Vec<T>, Vec<T>) {
    let rows = values.len() / (a + b);
    let mut left = Vec::with_capacity(rows * a);
    let mut right = Vec::with_capacity(rows * b);
    for row in values.chunks_exact(a + b) {
        left.extend_from_slice(&row[..a]);
        right.extend_from_slice(&row[a..]);
    }
    (left, right)
}
