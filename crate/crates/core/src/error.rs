use std::path::PathBuf;

use crate::voxgrid::VoxelCoord;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("duplicate coordinate {0:?}")]
    DuplicateCoordinate(VoxelCoord),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("coordinate lists of the two tensors differ")]
    SupportMismatch,
    #[error("invalid kernel: {0}")]
    InvalidKernel(String),
    #[error("operation requires a non-empty tensor")]
    EmptyTensor,
    #[error("no cached forward state for {0} layer")]
    MissingCache(&'static str),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: u16, classes: usize },
    #[error("probability row {row} sums to {sum}")]
    InvalidProbability { row: usize, sum: f64 },
    #[error("degenerate dataset statistics (std {0})")]
    DegenerateStats(f64),
    #[error("voxel {0:?} is not covered by any inference window")]
    UncoveredVoxel(VoxelCoord),
    #[error("bone occupancy {occupancy:.4} exceeds ceiling {ceiling:.4}")]
    OccupancyExceeded { occupancy: f64, ceiling: f64 },
    #[error("bad magic bytes in {0}")]
    BadMagic(String),
    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("file truncated: {0}")]
    TruncatedFile(String),
    #[error("checksum mismatch (stored {stored:#018x}, computed {computed:#018x})")]
    ChecksumMismatch { stored: u64, computed: u64 },
    #[error("volume manifest missing: {}", .0.display())]
    ManifestMissing(PathBuf),
    #[error("payload size mismatch: expected {expected} bytes, found {found}")]
    SizeMismatch { expected: usize, found: usize },
    #[error("unknown voxel value kind {0:?}")]
    UnknownKind(String),
    #[error("unsupported NIfTI datatype code {0}")]
    UnsupportedDatatype(i16),
    #[error("unsupported dimensionality {0} (only 3-D volumes are read)")]
    UnsupportedDim(i16),
    #[error("big-endian or malformed NIfTI header")]
    UnsupportedEndianness,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
