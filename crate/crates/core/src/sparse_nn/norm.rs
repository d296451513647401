use super::LayerCache;
use crate::error::{Error, Result};
use crate::real::Real;
use crate::voxgrid::SparseTensor;

pub const DEFAULT_NORM_EPS: f64 = 1e-5;

/// Per-channel affine parameters of sparse instance normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct NormParams<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub eps: T,
}

impl<T: Real> NormParams<T> {
    /// `gamma = 1`, `beta = 0`.
    pub fn identity(channels: usize, eps: T) -> Self {
        Self { gamma: vec![T::one(); channels], beta: vec![T::zero(); channels], eps }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

/// Normalizes each channel over all active rows using the population variance.
pub fn instance_norm_forward<T: Real>(
    st: &SparseTensor<T>,
    p: &NormParams<T>,
    training: bool,
) -> Result<(SparseTensor<T>, Option<LayerCache<T>>)> {
    let c = st.channels();
    if p.gamma.len() != c || p.beta.len() != c {
        return Err(Error::ShapeMismatch(format!(
            "norm has {}/{} parameters for {c} channels",
            p.gamma.len(),
            p.beta.len()
        )));
    }
    if !(p.eps > T::zero()) {
        return Err(Error::InvalidConfig("instance norm eps must be positive".into()));
    }
    let n = st.len();
    if n == 0 {
        return Err(Error::EmptyTensor);
    }
    let x = st.features();

    // Statistics are accumulated in f64 regardless of T.
    let mut mean = vec![0.0f64; c];
    for row in x.chunks_exact(c) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v.to_f64_lossy();
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0f64; c];
    for row in x.chunks_exact(c) {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            let d = v.to_f64_lossy() - m;
            *s += d * d;
        }
    }
    let eps = p.eps.to_f64_lossy();
    let inv_std: Vec<T> = var.iter().map(|s| T::from_f64_lossy(1.0 / (s / n as f64 + eps).sqrt())).collect();
    let mean: Vec<T> = mean.into_iter().map(T::from_f64_lossy).collect();

    let mut normalized = Vec::with_capacity(x.len());
    for row in x.chunks_exact(c) {
        for ch in 0..c {
            normalized.push((row[ch] - mean[ch]) * inv_std[ch]);
        }
    }
    let out: Vec<T> = normalized
        .chunks_exact(c)
        .flat_map(|row| row.iter().enumerate().map(|(ch, &h)| p.gamma[ch] * h + p.beta[ch]))
        .collect();
    let out = st.with_features(out, c)?;
    let cache = training.then(|| LayerCache::Norm { normalized, inv_std });
    Ok((out, cache))
}

pub fn sparse_instance_norm<T: Real>(st: &SparseTensor<T>, p: &NormParams<T>) -> Result<SparseTensor<T>> {
    instance_norm_forward(st, p, false).map(|(o, _)| o)
}

/// Returns `(d_input, d_gamma, d_beta)`.
pub(crate) fn instance_norm_backward<T: Real>(
    p: &NormParams<T>,
    normalized: &[T],
    inv_std: &[T],
    upstream: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let c = p.channels();
    let n = normalized.len() / c;
    let mut d_gamma = vec![T::zero(); c];
    let mut d_beta = vec![T::zero(); c];
    let mut sum_dxhat = vec![T::zero(); c];
    let mut sum_dxhat_xhat = vec![T::zero(); c];
    for (xh, g) in normalized.chunks_exact(c).zip(upstream.chunks_exact(c)) {
        for ch in 0..c {
            d_gamma[ch] += g[ch] * xh[ch];
            d_beta[ch] += g[ch];
            let dxhat = g[ch] * p.gamma[ch];
            sum_dxhat[ch] += dxhat;
            sum_dxhat_xhat[ch] += dxhat * xh[ch];
        }
    }
    let inv_n = T::one() / T::from_usize(n).expect("row count fits");
    let mut d_input = Vec::with_capacity(normalized.len());
    for (xh, g) in normalized.chunks_exact(c).zip(upstream.chunks_exact(c)) {
        for ch in 0..c {
            let dxhat = g[ch] * p.gamma[ch];
            d_input.push(inv_std[ch] * (dxhat - sum_dxhat[ch] * inv_n - xh[ch] * sum_dxhat_xhat[ch] * inv_n));
        }
    }
    (d_input, d_gamma, d_beta)
}
