//! File formats: RAWZ volumes, NIfTI-1 ingestion, BNC1 sparse caches.

pub(crate) mod bytes;
mod cache;
mod nifti;
mod rawz;


use std::path::Path;

pub use cache::{decode_cache, encode_cache, read_cache, write_cache, CACHE_VERSION};
pub use nifti::{decode_nifti1, read_nifti1};
pub use rawz::{
    export_mask, hu_to_i16, manifest_path, read_labels, read_rawz, write_hu_rawz, write_rawz, RawData, ValueKind,
    VolumeMeta,
};

use crate::error::{Error, Result};
use crate::volume::Volume;

/// True for `.nii` and `.nii.gz` paths.
pub fn is_nifti(path: &Path) -> bool {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_ascii_lowercase();
    name.ends_with(".nii") || name.ends_with(".nii.gz")
}

/// Loads a CT volume in HU from NIfTI-1 or RAWZ (`hu_i16`), chosen by file name.
pub fn load_hu_volume(path: impl AsRef<Path>) -> Result<(Volume<f32>, VolumeMeta)> {
    let path = path.as_ref();
    if is_nifti(path) {
        return read_nifti1(path);
    }
    match read_rawz(path)? {
        (RawData::Hu(v), meta) => Ok((Volume::new(meta.shape, v.into_iter().map(f32::from).collect())?, meta)),
        (RawData::Labels(_), _) => Err(Error::UnknownKind("expected hu_i16, found labels_u16".into())),
    }
}
