//! Rulebook-driven sparse convolutions.
//!
//! Every kernel offset is processed as gather → GEMM → scatter-add. Within one
//! offset each output row appears at most once, so scatter order per output
//! row is simply offset order and results do not depend on the worker count.

use std::sync::Arc;

use rayon::prelude::*;

use super::{LayerCache, LayerKind};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::voxgrid::{Rulebook, RulebookKind, SparseTensor};

/// One weight matrix `W_δ` (`C_in×C_out`, row-major) per kernel offset, plus an optional bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T> {
    pub weights: Vec<T>,
    pub bias: Option<Vec<T>>,
    pub kernel_volume: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl<T: Real> ConvParams<T> {
    pub fn zeros(kernel_volume: usize, in_channels: usize, out_channels: usize, bias: bool) -> Self {
        Self {
            weights: vec![T::zero(); kernel_volume * in_channels * out_channels],
            bias: bias.then(|| vec![T::zero(); out_channels]),
            kernel_volume,
            in_channels,
            out_channels,
        }
    }

    /// Weight matrix for the offset at `slot`.
    pub fn slot(&self, slot: usize) -> &[T] {
        let len = self.in_channels * self.out_channels;
        &self.weights[slot * len..(slot + 1) * len]
    }

    pub fn slot_mut(&mut self, slot: usize) -> &mut [T] {
        let len = self.in_channels * self.out_channels;
        &mut self.weights[slot * len..(slot + 1) * len]
    }

    fn validate(&self) -> Result<()> {
        if self.weights.len() != self.kernel_volume * self.in_channels * self.out_channels {
            return Err(Error::ShapeMismatch(format!(
                "{} weights for a {}x{}x{} kernel",
                self.weights.len(),
                self.kernel_volume,
                self.in_channels,
                self.out_channels
            )));
        }
        if let Some(b) = &self.bias {
            if b.len() != self.out_channels {
                return Err(Error::ShapeMismatch(format!("{} biases for {} outputs", b.len(), self.out_channels)));
            }
        }
        Ok(())
    }
}

fn expected_kind(kind: LayerKind) -> RulebookKind {
    match kind {
        LayerKind::SubmConv => RulebookKind::Submanifold,
        LayerKind::StridedConv => RulebookKind::Downsample,
        LayerKind::InverseConv => RulebookKind::Upsample,
        other => unreachable!("{other:?} is not a convolution"),
    }
}

/// Slots are processed in groups so at most a few per-offset products are alive at once.
fn slot_groups(volume: usize) -> impl Iterator<Item = std::ops::Range<usize>> {
    let step = rayon::current_num_threads().clamp(1, volume.max(1));
    (0..volume).step_by(step).map(move |s| s..(s + step).min(volume))
}

fn gather_rows<T: Real>(src: &[T], width: usize, rows: impl Iterator<Item = u32>, cap: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(cap * width);
    for r in rows {
        let r = r as usize;
        out.extend_from_slice(&src[r * width..(r + 1) * width]);
    }
    out
}

/// `out[o] += Σ W_δᵀ·input[i]` over all rulebook pairs.
pub(crate) fn conv_accumulate<T: Real>(
    input: &[T],
    rb: &Rulebook,
    weights: &[T],
    cin: usize,
    cout: usize,
    out: &mut [T],
) {
    let wlen = cin * cout;
    for group in slot_groups(rb.kernel().volume()) {
        let products: Vec<Vec<T>> = group
            .clone()
            .into_par_iter()
            .map(|slot| {
                let pairs = rb.pairs(slot);
                if pairs.is_empty() {
                    return Vec::new();
                }
                let gathered = gather_rows(input, cin, pairs.iter().map(|p| p.0), pairs.len());
                let mut prod = vec![T::zero(); pairs.len() * cout];
                let w = &weights[slot * wlen..(slot + 1) * wlen];
                T::gemm(pairs.len(), cin, cout, &gathered, (cin, 1), w, (cout, 1), T::zero(), &mut prod, (cout, 1));
                prod
            })
            .collect();
        for (slot, prod) in group.zip(products) {
            for (p, &(_, o)) in rb.pairs(slot).iter().enumerate() {
                let dst = &mut out[o as usize * cout..(o as usize + 1) * cout];
                for (d, s) in dst.iter_mut().zip(&prod[p * cout..(p + 1) * cout]) {
                    *d += *s;
                }
            }
        }
    }
}

/// Gradients of a rulebook convolution: `(d_input, d_weights)`.
pub(crate) fn conv_backward_core<T: Real>(
    input: &[T],
    rb: &Rulebook,
    weights: &[T],
    cin: usize,
    cout: usize,
    upstream: &[T],
) -> (Vec<T>, Vec<T>) {
    let wlen = cin * cout;
    let mut d_input = vec![T::zero(); rb.in_count() * cin];
    let mut d_weights = vec![T::zero(); rb.kernel().volume() * wlen];
    for group in slot_groups(rb.kernel().volume()) {
        let start = group.start;
        let dw_chunk = &mut d_weights[start * wlen..group.end * wlen];
        let d_rows: Vec<Vec<T>> = dw_chunk
            .par_chunks_mut(wlen)
            .enumerate()
            .map(|(k, dw)| {
                let slot = start + k;
                let pairs = rb.pairs(slot);
                if pairs.is_empty() {
                    return Vec::new();
                }
                let a = gather_rows(input, cin, pairs.iter().map(|p| p.0), pairs.len());
                let u = gather_rows(upstream, cout, pairs.iter().map(|p| p.1), pairs.len());
                // dW_δ = Aᵀ·U
                T::gemm(cin, pairs.len(), cout, &a, (1, cin), &u, (cout, 1), T::zero(), dw, (cout, 1));
                // dA = U·W_δᵀ
                let w = &weights[slot * wlen..(slot + 1) * wlen];
                let mut da = vec![T::zero(); pairs.len() * cin];
                T::gemm(pairs.len(), cout, cin, &u, (cout, 1), w, (1, cout), T::zero(), &mut da, (cin, 1));
                da
            })
            .collect();
        for (slot, da) in group.zip(d_rows) {
            for (p, &(i, _)) in rb.pairs(slot).iter().enumerate() {
                let dst = &mut d_input[i as usize * cin..(i as usize + 1) * cin];
                for (d, s) in dst.iter_mut().zip(&da[p * cin..(p + 1) * cin]) {
                    *d += *s;
                }
            }
        }
    }
    (d_input, d_weights)
}

pub(crate) fn column_sums<T: Real>(values: &[T], width: usize) -> Vec<T> {
    let mut sums = vec![T::zero(); width];
    for row in values.chunks_exact(width) {
        for (s, v) in sums.iter_mut().zip(row) {
            *s += *v;
        }
    }
    sums
}

/// Shared forward for the three convolution kinds.
pub fn conv_forward<T: Real>(
    kind: LayerKind,
    st: &SparseTensor<T>,
    rb: &Arc<Rulebook>,
    p: &ConvParams<T>,
    training: bool,
) -> Result<(SparseTensor<T>, Option<LayerCache<T>>)> {
    p.validate()?;
    if rb.kind() != expected_kind(kind) {
        return Err(Error::ShapeMismatch(format!("{kind:?} layer given a {:?} rulebook", rb.kind())));
    }
    if st.channels() != p.in_channels {
        return Err(Error::ShapeMismatch(format!(
            "input has {} channels, layer expects {}",
            st.channels(),
            p.in_channels
        )));
    }
    if p.kernel_volume != rb.kernel().volume() {
        return Err(Error::ShapeMismatch(format!(
            "weights for {} offsets, rulebook has {}",
            p.kernel_volume,
            rb.kernel().volume()
        )));
    }
    let same_support = Arc::ptr_eq(st.shared_coords(), rb.in_coords()) || st.coords() == rb.in_coords().as_slice();
    if !same_support {
        return Err(Error::ShapeMismatch("input support differs from the rulebook's input support".into()));
    }

    let cout = p.out_channels;
    let n_out = rb.out_count();
    let mut out = match &p.bias {
        Some(b) => b.iter().copied().cycle().take(n_out * cout).collect(),
        None => vec![T::zero(); n_out * cout],
    };
    conv_accumulate(st.features(), rb, &p.weights, p.in_channels, cout, &mut out);
    let out = SparseTensor::from_shared(rb.out_coords().clone(), out, cout)?;
    let cache = training.then(|| LayerCache::Conv {
        kind,
        input: st.features().to_vec(),
        rulebook: rb.clone(),
    });
    Ok((out, cache))
}

pub fn subm_conv_forward<T: Real>(st: &SparseTensor<T>, rb: &Arc<Rulebook>, p: &ConvParams<T>) -> Result<SparseTensor<T>> {
    conv_forward(LayerKind::SubmConv, st, rb, p, false).map(|(o, _)| o)
}

pub fn strided_conv_forward<T: Real>(
    st: &SparseTensor<T>,
    rb: &Arc<Rulebook>,
    p: &ConvParams<T>,
) -> Result<SparseTensor<T>> {
    conv_forward(LayerKind::StridedConv, st, rb, p, false).map(|(o, _)| o)
}

pub fn inverse_conv_forward<T: Real>(
    st_coarse: &SparseTensor<T>,
    rb_t: &Arc<Rulebook>,
    p: &ConvParams<T>,
) -> Result<SparseTensor<T>> {
    conv_forward(LayerKind::InverseConv, st_coarse, rb_t, p, false).map(|(o, _)| o)
}
