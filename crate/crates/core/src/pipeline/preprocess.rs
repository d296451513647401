use super::{DatasetStats, FusionConfig};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::volume::Volume;
use crate::voxgrid::{SparseTensor, VoxelCoord};

fn in_range(hu: f32, cfg: &FusionConfig) -> bool {
    let hu = f64::from(hu);
    hu >= cfg.hu_lo && hu <= cfg.hu_hi
}

fn coord_of(volume_shape: [usize; 3], index: usize) -> VoxelCoord {
    let plane = volume_shape[0] * volume_shape[1];
    VoxelCoord::new(
        (index % volume_shape[0]) as i32,
        ((index % plane) / volume_shape[0]) as i32,
        (index / plane) as i32,
    )
}

/// Keeps voxels with `hu_lo ≤ HU ≤ hu_hi` in z-major scan order; the feature is the raw HU value.
pub fn hu_threshold_to_sparse<T: Real>(volume: &Volume<f32>, cfg: &FusionConfig) -> SparseTensor<T> {
    let mut coords = Vec::new();
    let mut features = Vec::new();
    for (i, &hu) in volume.data.iter().enumerate() {
        if in_range(hu, cfg) {
            coords.push(coord_of(volume.shape, i));
            features.push(T::from_f64_lossy(f64::from(hu)));
        }
    }
    SparseTensor::new(coords, features, 1).expect("scan order yields distinct coordinates")
}

/// Thresholds `volume` and carries the label of every retained voxel.
pub fn threshold_with_labels<T: Real>(
    volume: &Volume<f32>,
    labels: &Volume<u16>,
    cfg: &FusionConfig,
) -> Result<SparseTensor<T>> {
    if volume.shape != labels.shape {
        return Err(Error::ShapeMismatch(format!("volume {:?} vs labels {:?}", volume.shape, labels.shape)));
    }
    let st = hu_threshold_to_sparse::<T>(volume, cfg);
    let carried =
        st.coords().iter().map(|c| *labels.get(c.x as usize, c.y as usize, c.z as usize)).collect();
    st.with_labels(carried)
}

/// Mean and population standard deviation of every in-range voxel of every volume.
pub fn compute_dataset_stats<'a>(
    volumes: impl IntoIterator<Item = &'a Volume<f32>> + Clone,
    cfg: &FusionConfig,
) -> Result<DatasetStats> {
    let mut count = 0u64;
    let mut sum = 0.0f64;
    for v in volumes.clone() {
        for &hu in v.data.iter().filter(|&&hu| in_range(hu, cfg)) {
            count += 1;
            sum += f64::from(hu);
        }
    }
    if count == 0 {
        return Err(Error::DegenerateStats(0.0));
    }
    let mean = sum / count as f64;
    let mut sq = 0.0f64;
    for v in volumes {
        for &hu in v.data.iter().filter(|&&hu| in_range(hu, cfg)) {
            let d = f64::from(hu) - mean;
            sq += d * d;
        }
    }
    let std = (sq / count as f64).sqrt();
    if std < 1e-6 {
        return Err(Error::DegenerateStats(std));
    }
    Ok(DatasetStats { mean, std })
}

/// `feature ← (HU − μ)/σ`.
pub fn zscore<T: Real>(st: &SparseTensor<T>, stats: &DatasetStats) -> SparseTensor<T> {
    let features = st
        .features()
        .iter()
        .map(|v| T::from_f64_lossy((v.to_f64_lossy() - stats.mean) / stats.std))
        .collect();
    st.with_features(features, st.channels()).expect("same shape")
}
