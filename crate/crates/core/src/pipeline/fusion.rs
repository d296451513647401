use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::voxgrid::VoxelCoord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    /// Fraction of the window edge shared by neighbouring windows.
    pub overlap: f64,
    /// Gaussian decay, relative to the window edge.
    pub decay_sigma: f64,
    pub hu_lo: f64,
    pub hu_hi: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { overlap: 0.5, decay_sigma: 0.5, hu_lo: 200.0, hu_hi: 3000.0 }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.overlap) {
            return Err(Error::InvalidConfig(format!("overlap {} outside [0, 1)", self.overlap)));
        }
        if !(self.decay_sigma > 0.0) {
            return Err(Error::InvalidConfig("decay sigma must be positive".into()));
        }
        if !(self.hu_lo < self.hu_hi) {
            return Err(Error::InvalidConfig(format!("HU range [{}, {}] is empty", self.hu_lo, self.hu_hi)));
        }
        Ok(())
    }
}

/// An axis-aligned inference window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowPlacement {
    pub origin: VoxelCoord,
    /// Edge length per axis, `[x, y, z]`.
    pub edge: [usize; 3],
}

impl WindowPlacement {
    /// `origin + edge/2`.
    pub fn center(&self) -> [f64; 3] {
        let o = self.origin.to_array();
        [0, 1, 2].map(|d| f64::from(o[d]) + self.edge[d] as f64 / 2.0)
    }

    pub fn origin_usize(&self) -> [usize; 3] {
        self.origin.to_array().map(|v| v as usize)
    }

    pub fn contains(&self, c: &VoxelCoord) -> bool {
        let (o, a) = (self.origin.to_array(), c.to_array());
        (0..3).all(|d| a[d] >= o[d] && ((a[d] - o[d]) as usize) < self.edge[d])
    }
}

fn axis_origins(extent: usize, edge: usize, overlap: f64) -> Vec<usize> {
    let stride = ((edge as f64 * (1.0 - overlap)).round() as usize).max(1);
    let mut origins: Vec<usize> = (0..).map(|k| k * stride).take_while(|&o| o + edge <= extent).collect();
    if origins.last().is_none_or(|&o| o + edge < extent) {
        origins.push(extent - edge);
    }
    origins
}

/// Sliding windows covering a volume of `shape` (`[X, Y, Z]`).
///
/// Per axis the edge is clamped to the extent, origins step by
/// `round(edge·(1 − overlap))`, and a final window flush with the far
/// boundary is appended when needed. Placements are ordered by origin
/// (z, then y, then x).
pub fn enumerate_inference_windows(shape: [usize; 3], cfg: &FusionConfig, window: usize) -> Vec<WindowPlacement> {
    let edge = shape.map(|s| s.min(window).max(1));
    let per_axis: Vec<Vec<usize>> = (0..3).map(|d| axis_origins(shape[d], edge[d], cfg.overlap)).collect();
    let mut out = Vec::new();
    for &z in &per_axis[2] {
        for &y in &per_axis[1] {
            for &x in &per_axis[0] {
                out.push(WindowPlacement { origin: VoxelCoord::new(x as i32, y as i32, z as i32), edge });
            }
        }
    }
    out
}

/// `exp(−Σ_d (x_d − m_d)² / (2·(σ·w_d)²))`, the per-axis Gaussian decay.
pub fn gaussian_weight(x: &VoxelCoord, placement: &WindowPlacement, decay_sigma: f64) -> f64 {
    let m = placement.center();
    let a = x.to_array();
    let exponent: f64 = (0..3)
        .map(|d| {
            let s = decay_sigma * placement.edge[d] as f64;
            (f64::from(a[d]) - m[d]).powi(2) / (2.0 * s * s)
        })
        .sum();
    (-exponent).exp()
}

/// Softmax scores of one window for a subset of the global support.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowScores {
    pub placement: WindowPlacement,
    /// Global row of each scored voxel.
    pub rows: Vec<u32>,
    /// `rows.len() × K`, row-major.
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fused {
    /// Unnormalized `Σ_t a_t·p_t`, `N × K`.
    pub scores: Vec<f64>,
    pub labels: Vec<u16>,
}

/// Weighted sum of window scores per voxel followed by argmax.
///
/// Windows are accumulated in placement order whatever order they are given
/// in, so the result is reproducible bit for bit. Ties go to the smallest id.
pub fn fuse_predictions(
    support: &[VoxelCoord],
    windows: &[WindowScores],
    classes: usize,
    weight: impl Fn(&VoxelCoord, &WindowPlacement) -> f64,
) -> Result<Fused> {
    let mut order: Vec<&WindowScores> = windows.iter().collect();
    order.sort_by_key(|w| w.placement.origin);
    let mut scores = vec![0.0f64; support.len() * classes];
    let mut covered = vec![false; support.len()];
    for w in order {
        if w.probs.len() != w.rows.len() * classes {
            return Err(Error::ShapeMismatch(format!(
                "window at {:?} has {} scores for {} rows",
                w.placement.origin,
                w.probs.len(),
                w.rows.len()
            )));
        }
        for (&row, p) in w.rows.iter().zip(w.probs.chunks_exact(classes)) {
            let row = row as usize;
            let coord = support
                .get(row)
                .ok_or_else(|| Error::ShapeMismatch(format!("window row {row} outside the support")))?;
            let a = weight(coord, &w.placement);
            for (acc, &pc) in scores[row * classes..(row + 1) * classes].iter_mut().zip(p) {
                *acc += a * pc;
            }
            covered[row] = true;
        }
    }
    if let Some(i) = covered.iter().position(|&c| !c) {
        return Err(Error::UncoveredVoxel(support[i]));
    }
    let labels = scores.chunks_exact(classes).map(argmax).collect();
    Ok(Fused { scores, labels })
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(values: &[f64]) -> u16 {
    let mut best = 0;
    for (c, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = c;
        }
    }
    best as u16
}
