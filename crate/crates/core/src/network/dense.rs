//! Dense reference forward pass.
//!
//! Applies the same weights as [`UNet::forward`] through ordinary zero-padded
//! dense convolutions over the full extent. After every convolution the output
//! is masked to the level's active set, and instance-norm statistics are taken
//! over active voxels only, so at active sites the result matches the sparse
//! network up to floating-point summation order. Used as an oracle and as the
//! baseline in the speed benchmark.

use rayon::prelude::*;

use super::{ConvBlock, UNet};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::sparse_nn::leaky;
use crate::voxgrid::SparseTensor;

/// Channel-last features on a grid padded by one voxel on every side.
struct Grid<T> {
    dims: [usize; 3],
    channels: usize,
    data: Vec<T>,
}

impl<T: Real> Grid<T> {
    fn zeros(dims: [usize; 3], channels: usize) -> Self {
        Self { dims, channels, data: vec![T::zero(); padded_cells(dims) * channels] }
    }
}

fn padded_cells(d: [usize; 3]) -> usize {
    (d[0] + 2) * (d[1] + 2) * (d[2] + 2)
}

fn plane_cells(d: [usize; 3]) -> usize {
    (d[0] + 2) * (d[1] + 2)
}

fn cell(d: [usize; 3], x: usize, y: usize, z: usize) -> usize {
    ((z + 1) * (d[1] + 2) + (y + 1)) * (d[0] + 2) + (x + 1)
}

/// Active set of one resolution level.
struct Level {
    dims: [usize; 3],
    mask: Vec<bool>,
    active: Vec<usize>,
}

impl Level {
    fn from_voxels(dims: [usize; 3], voxels: impl Iterator<Item = [usize; 3]>) -> Self {
        let mut mask = vec![false; padded_cells(dims)];
        for [x, y, z] in voxels {
            mask[cell(dims, x, y, z)] = true;
        }
        let active = mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect();
        Self { dims, mask, active }
    }

    fn coarsen(&self) -> Self {
        let d = self.dims;
        let coarse = d.map(|v| v.div_ceil(2));
        let (px, py) = (d[0] + 2, d[1] + 2);
        let voxels = self.active.iter().map(|&c| {
            let (x, y, z) = (c % px - 1, (c / px) % py - 1, c / (px * py) - 1);
            [x / 2, y / 2, z / 2]
        });
        Self::from_voxels(coarse, voxels)
    }

    fn apply_mask<T: Real>(&self, grid: &mut Grid<T>) {
        let c = grid.channels;
        grid.data.par_chunks_mut(c).zip(self.mask.par_iter()).for_each(|(row, &m)| {
            if !m {
                row.fill(T::zero());
            }
        });
    }
}

fn subm_dense<T: Real>(input: &Grid<T>, weights: &[T], cout: usize, level: &Level) -> Grid<T> {
    let d = input.dims;
    let cin = input.channels;
    let mut out = Grid::zeros(d, cout);
    let (px, plane) = (d[0] + 2, plane_cells(d));
    // Every interior cell of a plane lies in this contiguous row range; the
    // border columns it also covers are cleared by the mask.
    let (r0, r1) = (px + 1, (d[1] + 1) * px - 1);
    let wlen = cin * cout;
    out.data.par_chunks_mut(plane * cout).enumerate().for_each(|(pz, oplane)| {
        if pz == 0 || pz == d[2] + 1 {
            return;
        }
        for slot in 0..27 {
            let (dz, dy, dx) = (slot as isize / 9 - 1, (slot as isize / 3) % 3 - 1, slot as isize % 3 - 1);
            let start = ((pz as isize + dz) * plane as isize + r0 as isize + dy * px as isize + dx) as usize;
            T::gemm(
                r1 - r0,
                cin,
                cout,
                &input.data[start * cin..],
                (cin, 1),
                &weights[slot * wlen..(slot + 1) * wlen],
                (cout, 1),
                T::one(),
                &mut oplane[r0 * cout..],
                (cout, 1),
            );
        }
    });
    level.apply_mask(&mut out);
    out
}

fn strided_dense<T: Real>(fine: &Grid<T>, weights: &[T], cout: usize, coarse: &Level) -> Grid<T> {
    let (fd, cd) = (fine.dims, coarse.dims);
    let cin = fine.channels;
    let mut out = Grid::zeros(cd, cout);
    let (fpx, fpy) = (fd[0] + 2, fd[1] + 2);
    let cpx = cd[0] + 2;
    let wlen = cin * cout;
    out.data.par_chunks_mut(plane_cells(cd) * cout).enumerate().for_each(|(pz, oplane)| {
        if pz == 0 || pz == cd[2] + 1 {
            return;
        }
        let cz = pz - 1;
        for slot in 0..8 {
            let (dz, dy, dx) = (slot / 4, (slot / 2) % 2, slot % 2);
            let w = &weights[slot * wlen..(slot + 1) * wlen];
            for cy in 0..cd[1] {
                let src = ((2 * cz + dz + 1) * fpy + 2 * cy + dy + 1) * fpx + 1 + dx;
                let dst = (cy + 1) * cpx + 1;
                T::gemm(
                    cd[0],
                    cin,
                    cout,
                    &fine.data[src * cin..],
                    (2 * cin, 1),
                    w,
                    (cout, 1),
                    T::one(),
                    &mut oplane[dst * cout..],
                    (cout, 1),
                );
            }
        }
    });
    coarse.apply_mask(&mut out);
    out
}

fn inverse_dense<T: Real>(coarse: &Grid<T>, weights: &[T], cout: usize, fine: &Level) -> Grid<T> {
    let (cd, fd) = (coarse.dims, fine.dims);
    let cin = coarse.channels;
    let mut out = Grid::zeros(fd, cout);
    let (cpx, cpy) = (cd[0] + 2, cd[1] + 2);
    let fpx = fd[0] + 2;
    let wlen = cin * cout;
    out.data.par_chunks_mut(plane_cells(fd) * cout).enumerate().for_each(|(pz, oplane)| {
        if pz == 0 || pz == fd[2] + 1 {
            return;
        }
        let z = pz - 1;
        for y in 0..fd[1] {
            let src = ((z / 2 + 1) * cpy + y / 2 + 1) * cpx + 1;
            for dx in 0..2 {
                let slot = (z % 2) * 4 + (y % 2) * 2 + dx;
                let dst = (y + 1) * fpx + 1 + dx;
                T::gemm(
                    cd[0],
                    cin,
                    cout,
                    &coarse.data[src * cin..],
                    (cin, 1),
                    &weights[slot * wlen..(slot + 1) * wlen],
                    (cout, 1),
                    T::one(),
                    &mut oplane[dst * cout..],
                    (2 * cout, 1),
                );
            }
        }
    });
    fine.apply_mask(&mut out);
    out
}

/// Instance norm over the active cells followed by LeakyReLU; inactive cells stay zero.
fn norm_act<T: Real>(grid: &mut Grid<T>, block: &ConvBlock<T>, level: &Level, slope: T) {
    let c = grid.channels;
    let n = level.active.len() as f64;
    let mut mean = vec![0.0f64; c];
    for &i in &level.active {
        for (m, v) in mean.iter_mut().zip(&grid.data[i * c..(i + 1) * c]) {
            *m += v.to_f64_lossy();
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0f64; c];
    for &i in &level.active {
        for ((s, v), m) in var.iter_mut().zip(&grid.data[i * c..(i + 1) * c]).zip(&mean) {
            let d = v.to_f64_lossy() - m;
            *s += d * d;
        }
    }
    let eps = block.norm.eps.to_f64_lossy();
    let inv_std: Vec<T> = var.iter().map(|s| T::from_f64_lossy(1.0 / (s / n + eps).sqrt())).collect();
    let mean: Vec<T> = mean.into_iter().map(T::from_f64_lossy).collect();
    for &i in &level.active {
        for (ch, v) in grid.data[i * c..(i + 1) * c].iter_mut().enumerate() {
            let h = (*v - mean[ch]) * inv_std[ch];
            *v = leaky(block.norm.gamma[ch] * h + block.norm.beta[ch], slope);
        }
    }
}

fn concat<T: Real>(a: &Grid<T>, b: &Grid<T>) -> Grid<T> {
    let (ca, cb) = (a.channels, b.channels);
    let mut out = Grid::zeros(a.dims, ca + cb);
    out.data
        .par_chunks_mut(ca + cb)
        .zip(a.data.par_chunks(ca).zip(b.data.par_chunks(cb)))
        .for_each(|(dst, (ra, rb))| {
            dst[..ca].copy_from_slice(ra);
            dst[ca..].copy_from_slice(rb);
        });
    out
}

fn affine_all<T: Real>(x: &[T], cin: usize, w: &[T], b: &[T], cout: usize) -> Vec<T> {
    let rows = x.len() / cin;
    let mut out: Vec<T> = b.iter().copied().cycle().take(rows * cout).collect();
    T::gemm(rows, cin, cout, x, (cin, 1), w, (cout, 1), T::one(), &mut out, (cout, 1));
    out
}

/// Logits of `net` for `st`, computed densely over `extent` (`[X, Y, Z]`).
///
/// Every coordinate of `st` must lie inside the extent.
pub fn dense_reference_forward<T: Real>(
    net: &UNet<T>,
    st: &SparseTensor<T>,
    extent: [usize; 3],
) -> Result<SparseTensor<T>> {
    if st.is_empty() {
        return Err(Error::EmptyTensor);
    }
    if st.channels() != 1 {
        return Err(Error::ShapeMismatch(format!("network input needs 1 channel, got {}", st.channels())));
    }
    let mut voxels = Vec::with_capacity(st.len());
    for c in st.coords() {
        let inside = c.to_array().iter().zip(extent).all(|(&v, e)| v >= 0 && (v as usize) < e);
        if !inside {
            return Err(Error::ShapeMismatch(format!("{c:?} lies outside extent {extent:?}")));
        }
        voxels.push(c.to_array().map(|v| v as usize));
    }

    let cfg = net.config();
    let levels_n = cfg.levels;
    let ch = cfg.channels();
    let slope = net.slope();
    let mut levels = vec![Level::from_voxels(extent, voxels.iter().copied())];
    for l in 1..levels_n {
        let next = levels[l - 1].coarsen();
        levels.push(next);
    }

    let mut h = Grid::zeros(extent, 1);
    for (&[x, y, z], v) in voxels.iter().zip(st.features()) {
        h.data[cell(extent, x, y, z)] = *v;
    }

    let mut skips = Vec::with_capacity(levels_n - 1);
    for l in 0..levels_n {
        for block in &net.encoder[l] {
            h = subm_dense(&h, &block.conv.weights, ch[l], &levels[l]);
            norm_act(&mut h, block, &levels[l], slope);
        }
        if l + 1 < levels_n {
            let block = &net.down[l];
            let mut out = strided_dense(&h, &block.conv.weights, ch[l + 1], &levels[l + 1]);
            norm_act(&mut out, block, &levels[l + 1], slope);
            skips.push(std::mem::replace(&mut h, out));
        }
    }
    for l in (0..levels_n - 1).rev() {
        let block = &net.up[l];
        let mut up = inverse_dense(&h, &block.conv.weights, ch[l], &levels[l]);
        norm_act(&mut up, block, &levels[l], slope);
        let skip = skips.pop().expect("one skip per level");
        h = concat(&up, &skip);
        drop(skip);
        for block in &net.decoder[l] {
            h = subm_dense(&h, &block.conv.weights, ch[l], &levels[l]);
            norm_act(&mut h, block, &levels[l], slope);
        }
    }

    let head = &net.head;
    let mut hidden = affine_all(&h.data, head.channels, &head.w1, &head.b1, head.channels);
    drop(h);
    hidden.iter_mut().for_each(|v| *v = leaky(*v, head.slope));
    let all_logits = affine_all(&hidden, head.channels, &head.w2, &head.b2, head.classes);
    let k = head.classes;
    let mut logits = Vec::with_capacity(st.len() * k);
    for &[x, y, z] in &voxels {
        let i = cell(extent, x, y, z);
        logits.extend_from_slice(&all_logits[i * k..(i + 1) * k]);
    }
    SparseTensor::from_shared(st.shared_coords().clone(), logits, k)
}
