//! RAWZ: a raw little-endian payload plus a `<payload>.json` manifest.
//!
//! The payload holds `X·Y·Z` 16-bit values, x fastest
//! (`index = z·Y·X + y·X + x`). The manifest records shape, spacing (mm) and
//! value kind (`"hu_i16"` or `"labels_u16"`).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Volume;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ValueKind {
    #[serde(rename = "hu_i16")]
    HuI16,
    #[serde(rename = "labels_u16")]
    LabelsU16,
}

impl ValueKind {
    fn parse(name: &str) -> Result<Self> {
        match name {
            "hu_i16" => Ok(ValueKind::HuI16),
            "labels_u16" => Ok(ValueKind::LabelsU16),
            other => Err(Error::UnknownKind(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VolumeMeta {
    /// `[X, Y, Z]`.
    pub shape: [usize; 3],
    /// Millimetres per voxel along each axis.
    pub spacing: [f64; 3],
    pub kind: ValueKind,
}

impl VolumeMeta {
    pub fn voxel_count(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.shape.contains(&0) {
            return Err(Error::ShapeMismatch(format!("shape {:?} has an empty axis", self.shape)));
        }
        if !self.spacing.iter().all(|&s| s > 0.0 && s.is_finite()) {
            return Err(Error::InvalidConfig(format!("spacing {:?} must be positive", self.spacing)));
        }
        Ok(())
    }
}

/// The manifest as written; `kind` stays a string so unknown kinds get a precise error.
#[derive(Serialize, Deserialize)]
struct Manifest {
    shape: [usize; 3],
    spacing: [f64; 3],
    kind: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RawData {
    Hu(Vec<i16>),
    Labels(Vec<u16>),
}

impl RawData {
    pub fn kind(&self) -> ValueKind {
        match self {
            RawData::Hu(_) => ValueKind::HuI16,
            RawData::Labels(_) => ValueKind::LabelsU16,
        }
    }

    fn len(&self) -> usize {
        match self {
            RawData::Hu(v) => v.len(),
            RawData::Labels(v) => v.len(),
        }
    }
}

/// Path of the JSON manifest belonging to `payload`.
pub fn manifest_path(payload: &Path) -> PathBuf {
    let mut name = payload.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

pub fn write_rawz(path: impl AsRef<Path>, data: &RawData, meta: &VolumeMeta) -> Result<()> {
    let path = path.as_ref();
    meta.validate()?;
    if data.kind() != meta.kind {
        return Err(Error::UnknownKind(format!("{:?} data with {:?} manifest", data.kind(), meta.kind)));
    }
    if data.len() != meta.voxel_count() {
        return Err(Error::SizeMismatch { expected: meta.voxel_count(), found: data.len() });
    }
    let bytes: Vec<u8> = match data {
        RawData::Hu(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        RawData::Labels(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
    };
    let kind = serde_json::to_value(meta.kind)?.as_str().expect("kind serializes to a string").to_string();
    let manifest = Manifest { shape: meta.shape, spacing: meta.spacing, kind };
    std::fs::write(path, bytes)?;
    std::fs::write(manifest_path(path), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn read_rawz(path: impl AsRef<Path>) -> Result<(RawData, VolumeMeta)> {
    let path = path.as_ref();
    let mpath = manifest_path(path);
    let text = match std::fs::read_to_string(&mpath) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(Error::ManifestMissing(mpath)),
        Err(e) => return Err(e.into()),
    };
    let manifest: Manifest = serde_json::from_str(&text)?;
    let meta = VolumeMeta { shape: manifest.shape, spacing: manifest.spacing, kind: ValueKind::parse(&manifest.kind)? };
    meta.validate()?;
    let bytes = std::fs::read(path)?;
    let expected = meta.voxel_count() * 2;
    if bytes.len() != expected {
        return Err(Error::SizeMismatch { expected, found: bytes.len() });
    }
    let pairs = bytes.chunks_exact(2).map(|b| [b[0], b[1]]);
    let data = match meta.kind {
        ValueKind::HuI16 => RawData::Hu(pairs.map(i16::from_le_bytes).collect()),
        ValueKind::LabelsU16 => RawData::Labels(pairs.map(u16::from_le_bytes).collect()),
    };
    Ok((data, meta))
}

/// Writes a label volume as RAWZ with kind `labels_u16`.
pub fn export_mask(path: impl AsRef<Path>, labels: &Volume<u16>, spacing: [f64; 3]) -> Result<()> {
    let meta = VolumeMeta { shape: labels.shape, spacing, kind: ValueKind::LabelsU16 };
    write_rawz(path, &RawData::Labels(labels.data.clone()), &meta)
}

/// Writes HU values as RAWZ `hu_i16`, rounding to the nearest integer and saturating.
pub fn write_hu_rawz(path: impl AsRef<Path>, hu: &Volume<f32>, spacing: [f64; 3]) -> Result<()> {
    let meta = VolumeMeta { shape: hu.shape, spacing, kind: ValueKind::HuI16 };
    write_rawz(path, &RawData::Hu(hu_to_i16(&hu.data)), &meta)
}

pub fn hu_to_i16(values: &[f32]) -> Vec<i16> {
    values.iter().map(|&v| v.round().clamp(f32::from(i16::MIN), f32::from(i16::MAX)) as i16).collect()
}

/// Reads a label volume; the manifest kind must be `labels_u16`.
pub fn read_labels(path: impl AsRef<Path>) -> Result<(Volume<u16>, VolumeMeta)> {
    match read_rawz(path)? {
        (RawData::Labels(v), meta) => Ok((Volume::new(meta.shape, v)?, meta)),
        (RawData::Hu(_), _) => Err(Error::UnknownKind("expected labels_u16, found hu_i16".into())),
    }
}
