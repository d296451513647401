//! Sparse voxel segmentation engine for CT bone segmentation.
//!
//! The crate is organised bottom-up:
//!
//! - [`voxgrid`]: sparse tensors, coordinate indexing and convolution rulebooks.
//! - [`sparse_nn`]: forward and backward passes of every sparse layer.
//! - [`network`]: the sparse U-Net, its optimizer and checkpoint format.
//! - [`objective`]: label-smoothed cross-entropy, Soft Dice and hard Dice.
//! - [`pipeline`]: HU thresholding, window sampling, sliding-window fusion,
//!   full-volume prediction and synthetic phantoms.
//! - [`io_ct`]: RAWZ volumes, NIfTI-1 ingestion and the sparse cache format.
//!
//! Every numeric routine is generic over [`Real`], so the same code runs in
//! 32-bit production mode and 64-bit verification mode.

pub mod checksum;
mod error;
pub mod io_ct;
pub mod network;
pub mod objective;
pub mod pipeline;
mod real;
pub mod sparse_nn;
mod volume;
pub mod voxgrid;

pub use error::{Error, Result};
pub use real::Real;
pub use volume::Volume;
pub use voxgrid::{SparseTensor, VoxelCoord};
