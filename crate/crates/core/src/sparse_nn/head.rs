use super::{leaky, leaky_grad, LayerCache};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::voxgrid::SparseTensor;

/// Two-layer per-voxel classifier: `affine(C→C) → LeakyReLU → affine(C→K)`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams<T> {
    /// `C×C`, row-major.
    pub w1: Vec<T>,
    pub b1: Vec<T>,
    /// `C×K`, row-major.
    pub w2: Vec<T>,
    pub b2: Vec<T>,
    pub channels: usize,
    pub classes: usize,
    pub slope: T,
}

impl<T: Real> HeadParams<T> {
    pub fn zeros(channels: usize, classes: usize, slope: T) -> Self {
        Self {
            w1: vec![T::zero(); channels * channels],
            b1: vec![T::zero(); channels],
            w2: vec![T::zero(); channels * classes],
            b2: vec![T::zero(); classes],
            channels,
            classes,
            slope,
        }
    }

    fn validate(&self) -> Result<()> {
        let (c, k) = (self.channels, self.classes);
        if self.w1.len() != c * c || self.b1.len() != c || self.w2.len() != c * k || self.b2.len() != k {
            return Err(Error::ShapeMismatch(format!("inconsistent head parameters for C={c}, K={k}")));
        }
        Ok(())
    }
}

fn affine<T: Real>(x: &[T], rows: usize, w: &[T], b: &[T], cin: usize, cout: usize) -> Vec<T> {
    let mut out: Vec<T> = b.iter().copied().cycle().take(rows * cout).collect();
    T::gemm(rows, cin, cout, x, (cin, 1), w, (cout, 1), T::one(), &mut out, (cout, 1));
    out
}

pub fn mlp_head_train<T: Real>(
    st: &SparseTensor<T>,
    p: &HeadParams<T>,
    training: bool,
) -> Result<(SparseTensor<T>, Option<LayerCache<T>>)> {
    p.validate()?;
    if st.channels() != p.channels {
        return Err(Error::ShapeMismatch(format!(
            "head expects {} channels, input has {}",
            p.channels,
            st.channels()
        )));
    }
    let n = st.len();
    let hidden = affine(st.features(), n, &p.w1, &p.b1, p.channels, p.channels);
    let activated: Vec<T> = hidden.iter().map(|&h| leaky(h, p.slope)).collect();
    let logits = affine(&activated, n, &p.w2, &p.b2, p.channels, p.classes);
    let out = st.with_features(logits, p.classes)?;
    let cache = training.then(|| LayerCache::MlpHead { input: st.features().to_vec(), hidden });
    Ok((out, cache))
}

pub fn mlp_head_forward<T: Real>(st: &SparseTensor<T>, p: &HeadParams<T>) -> Result<SparseTensor<T>> {
    mlp_head_train(st, p, false).map(|(o, _)| o)
}

/// Returns `(d_input, [d_w1, d_b1, d_w2, d_b2])`.
pub(crate) fn mlp_head_backward<T: Real>(
    p: &HeadParams<T>,
    input: &[T],
    hidden: &[T],
    upstream: &[T],
) -> (Vec<T>, Vec<Vec<T>>) {
    let (c, k) = (p.channels, p.classes);
    let n = input.len() / c;
    let activated: Vec<T> = hidden.iter().map(|&h| leaky(h, p.slope)).collect();

    let mut d_w2 = vec![T::zero(); c * k];
    T::gemm(c, n, k, &activated, (1, c), upstream, (k, 1), T::zero(), &mut d_w2, (k, 1));
    let d_b2 = super::conv::column_sums(upstream, k);

    let mut d_hidden = vec![T::zero(); n * c];
    T::gemm(n, k, c, upstream, (k, 1), &p.w2, (1, k), T::zero(), &mut d_hidden, (c, 1));
    for (d, &h) in d_hidden.iter_mut().zip(hidden) {
        *d *= leaky_grad(h, p.slope);
    }

    let mut d_w1 = vec![T::zero(); c * c];
    T::gemm(c, n, c, input, (1, c), &d_hidden, (c, 1), T::zero(), &mut d_w1, (c, 1));
    let d_b1 = super::conv::column_sums(&d_hidden, c);

    let mut d_input = vec![T::zero(); n * c];
    T::gemm(n, c, c, &d_hidden, (c, 1), &p.w1, (1, c), T::zero(), &mut d_input, (c, 1));
    (d_input, vec![d_w1, d_b1, d_w2, d_b2])
}
