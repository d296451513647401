//! End-to-end data flow from HU volumes to fused label volumes.
//!
//! Thresholding keeps bone-range voxels as a sparse tensor; features are
//! z-scored with training-set statistics. Training draws windows either
//! uniformly or centered on foreground. Inference slides overlapping windows
//! over the volume and fuses their softmax scores with a Gaussian decay.

mod fusion;
mod phantom;
mod predict;
mod preprocess;
mod sampling;
mod train;


use serde::{Deserialize, Serialize};

pub use fusion::{
    argmax, enumerate_inference_windows, fuse_predictions, gaussian_weight, FusionConfig, Fused, WindowPlacement,
    WindowScores,
};
pub use phantom::{generate_phantom, LabeledVolume, PhantomSpec, Primitive};
pub use predict::{predict_volume, predict_with_network, ForwardMode, PredictConfig, Prediction, StageTimings};
pub use preprocess::{compute_dataset_stats, hu_threshold_to_sparse, threshold_with_labels, zscore};
pub use sampling::{crop_window, sample_training_window, SamplingConfig};
pub use train::{train, TrainConfig, TrainOutcome};

/// Training-set intensity statistics used for z-scoring.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub mean: f64,
    pub std: f64,
}
