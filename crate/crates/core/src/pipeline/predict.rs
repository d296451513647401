use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::fusion::{enumerate_inference_windows, fuse_predictions, gaussian_weight, WindowScores};
use super::preprocess::{hu_threshold_to_sparse, zscore};
use super::sampling::window_rows;
use super::{DatasetStats, FusionConfig};
use crate::error::{Error, Result};
use crate::network::{dense_reference_forward, Checkpoint, UNet};
use crate::objective::softmax_rows;
use crate::real::Real;
use crate::volume::Volume;
use crate::voxgrid::SparseTensor;

/// How each window's logits are computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ForwardMode {
    #[default]
    Sparse,
    /// Zero-padded dense convolutions over the whole window.
    Dense,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictConfig {
    pub fusion: FusionConfig,
    pub window: usize,
    /// Worker threads; `None` uses the global pool.
    pub workers: Option<usize>,
    pub mode: ForwardMode,
}

impl Default for PredictConfig {
    fn default() -> Self {
        Self { fusion: FusionConfig::default(), window: 128, workers: None, mode: ForwardMode::Sparse }
    }
}

/// Wall-clock seconds per stage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub preprocess: f64,
    pub forward: f64,
    pub fuse: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub labels: Volume<u16>,
    /// Fused label of every thresholded voxel, in scan order.
    pub sparse_labels: Vec<u16>,
    /// Fused unnormalized class scores of every thresholded voxel, `N × K`.
    pub scores: Vec<f64>,
    pub active_voxels: usize,
    pub windows: usize,
    pub timings: StageTimings,
}

/// Runs the full inference pipeline with the network stored in `ckpt` (32-bit).
pub fn predict_volume(ckpt: &Checkpoint, volume: &Volume<f32>, cfg: &PredictConfig) -> Result<Prediction> {
    let net = ckpt.network::<f32>()?;
    predict_with_network(&net, &ckpt.stats, volume, cfg)
}

/// Threshold → z-score → per-window forward and softmax → fusion → dense labels.
pub fn predict_with_network<T: Real>(
    net: &UNet<T>,
    stats: &DatasetStats,
    volume: &Volume<f32>,
    cfg: &PredictConfig,
) -> Result<Prediction> {
    cfg.fusion.validate()?;
    if volume.is_empty() {
        return Err(Error::EmptyTensor);
    }
    match cfg.workers {
        Some(0) => Err(Error::InvalidConfig("worker count must be at least 1".into())),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::InvalidConfig(format!("cannot start {n} workers: {e}")))?;
            pool.install(|| predict_inner(net, stats, volume, cfg))
        }
        None => predict_inner(net, stats, volume, cfg),
    }
}

fn predict_inner<T: Real>(
    net: &UNet<T>,
    stats: &DatasetStats,
    volume: &Volume<f32>,
    cfg: &PredictConfig,
) -> Result<Prediction> {
    let classes = net.config().classes;
    let started = Instant::now();
    let st = zscore(&hu_threshold_to_sparse::<T>(volume, &cfg.fusion), stats);
    let placements = enumerate_inference_windows(volume.shape, &cfg.fusion, cfg.window);
    let crops: Vec<_> = placements
        .iter()
        .map(|p| {
            let (rows, local) = window_rows(st.coords(), p.origin_usize(), p.edge);
            let features = rows.iter().map(|&r| st.features()[r as usize]).collect();
            (p, rows, local, features)
        })
        .filter(|(_, rows, _, _)| !rows.is_empty())
        .collect();
    let preprocess = started.elapsed().as_secs_f64();

    let started = Instant::now();
    let windows = crops
        .into_par_iter()
        .map(|(placement, rows, local, features)| {
            let window = SparseTensor::new(local, features, 1)?;
            let logits = match cfg.mode {
                ForwardMode::Sparse => net.predict_logits(&window)?,
                ForwardMode::Dense => dense_reference_forward(net, &window, placement.edge)?,
            };
            let probs = softmax_rows(logits.features(), classes).into_iter().map(T::to_f64_lossy).collect();
            Ok(WindowScores { placement: *placement, rows, probs })
        })
        .collect::<Result<Vec<_>>>()?;
    let forward = started.elapsed().as_secs_f64();

    let started = Instant::now();
    let mut labels = Volume::filled(volume.shape, 0u16);
    let (sparse_labels, scores) = if st.is_empty() {
        (Vec::new(), Vec::new())
    } else {
        let sigma = cfg.fusion.decay_sigma;
        let fused = fuse_predictions(st.coords(), &windows, classes, |x, p| gaussian_weight(x, p, sigma))?;
        for (c, &label) in st.coords().iter().zip(&fused.labels) {
            labels.set(c.x as usize, c.y as usize, c.z as usize, label);
        }
        (fused.labels, fused.scores)
    };
    let fuse = started.elapsed().as_secs_f64();

    Ok(Prediction {
        labels,
        sparse_labels,
        scores,
        active_voxels: st.len(),
        windows: windows.len(),
        timings: StageTimings { preprocess, forward, fuse },
    })
}
