use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::voxgrid::{SparseTensor, VoxelCoord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    /// Window edge per axis, in voxels.
    pub window: usize,
    /// Probability of centering the window on a foreground voxel.
    pub rho: f64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self { window: 128, rho: 0.33 }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window < 8 {
            return Err(Error::InvalidConfig(format!("window edge {} is below 8", self.window)));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::InvalidConfig(format!("rho {} outside [0, 1]", self.rho)));
        }
        Ok(())
    }
}

/// Rows of `st` inside the box `[origin, origin + edge)`, re-expressed relative to `origin`.
pub fn crop_window<T: Real>(st: &SparseTensor<T>, origin: [usize; 3], edge: [usize; 3]) -> SparseTensor<T> {
    let (rows, coords) = window_rows(st.coords(), origin, edge);
    let c = st.channels();
    let mut features = Vec::with_capacity(rows.len() * c);
    for &r in &rows {
        features.extend_from_slice(st.row(r as usize));
    }
    let window = SparseTensor::new(coords, features, c).expect("cropping keeps coordinates distinct");
    match st.labels() {
        Some(labels) => {
            window.with_labels(rows.iter().map(|&r| labels[r as usize]).collect()).expect("one label per row")
        }
        None => window,
    }
}

/// Indices of the coordinates inside the box and their local coordinates.
pub(crate) fn window_rows(coords: &[VoxelCoord], origin: [usize; 3], edge: [usize; 3]) -> (Vec<u32>, Vec<VoxelCoord>) {
    let lo = origin.map(|v| v as i32);
    let hi = [0, 1, 2].map(|d| (origin[d] + edge[d]) as i32);
    let mut rows = Vec::new();
    let mut local = Vec::new();
    for (i, c) in coords.iter().enumerate() {
        let a = c.to_array();
        if (0..3).all(|d| a[d] >= lo[d] && a[d] < hi[d]) {
            rows.push(i as u32);
            local.push(VoxelCoord::new(a[0] - lo[0], a[1] - lo[1], a[2] - lo[2]));
        }
    }
    (rows, local)
}

/// Draws one training window from a labeled case.
///
/// The window edge is clamped to the volume. With probability `rho` a
/// uniformly drawn foreground voxel (label > 0) becomes the window center and
/// the origin is clamped into bounds; otherwise, or when there is no
/// foreground, the origin is uniform over all valid origins. The returned
/// window may be empty if it lands in a region without retained voxels.
pub fn sample_training_window<T: Real, R: Rng + ?Sized>(
    st: &SparseTensor<T>,
    shape: [usize; 3],
    cfg: &SamplingConfig,
    rng: &mut R,
) -> Result<SparseTensor<T>> {
    let labels = st
        .labels()
        .ok_or_else(|| Error::ShapeMismatch("training cases need labels".into()))?;
    let edge = shape.map(|s| s.min(cfg.window));
    let foreground_branch = rng.random::<f64>() < cfg.rho;
    let foreground: Vec<usize> = if foreground_branch {
        labels.iter().enumerate().filter(|(_, &l)| l > 0).map(|(i, _)| i).collect()
    } else {
        Vec::new()
    };
    let origin = if foreground.is_empty() {
        [0, 1, 2].map(|d| rng.random_range(0..=shape[d] - edge[d]))
    } else {
        let center = st.coords()[foreground[rng.random_range(0..foreground.len())]].to_array();
        [0, 1, 2].map(|d| (center[d].max(0) as usize).saturating_sub(edge[d] / 2).min(shape[d] - edge[d]))
    };
    Ok(crop_window(st, origin, edge))
}
