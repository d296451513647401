//! Read-only NIfTI-1 ingestion (single-file `.nii`, optionally gzip-compressed).
//!
//! Only little-endian 3-D volumes of signed 16-bit integers (datatype 4) or
//! 32-bit floats (datatype 16) are accepted. Values are mapped to HU as
//! `stored·scl_slope + scl_inter`, with a zero slope meaning no scaling.

use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;

use super::rawz::{ValueKind, VolumeMeta};
use crate::error::{Error, Result};
use crate::volume::Volume;

const HEADER_SIZE: usize = 348;
const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;

fn i16_at(b: &[u8], at: usize) -> i16 {
    i16::from_le_bytes([b[at], b[at + 1]])
}

fn f32_at(b: &[u8], at: usize) -> f32 {
    f32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

pub fn read_nifti1(path: impl AsRef<Path>) -> Result<(Volume<f32>, VolumeMeta)> {
    let raw = std::fs::read(path)?;
    let bytes = if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out)?;
        out
    } else {
        raw
    };
    decode_nifti1(&bytes)
}

pub fn decode_nifti1(b: &[u8]) -> Result<(Volume<f32>, VolumeMeta)> {
    if b.len() < HEADER_SIZE {
        return Err(Error::TruncatedFile(format!("NIfTI header needs {HEADER_SIZE} bytes, file has {}", b.len())));
    }
    if &b[344..348] != b"n+1\0" {
        return Err(Error::BadMagic("NIfTI-1 single file".into()));
    }
    let sizeof_hdr = i32::from_le_bytes([b[0], b[1], b[2], b[3]]);
    let ndim = i16_at(b, 40);
    if sizeof_hdr != HEADER_SIZE as i32 || !(1..=7).contains(&ndim) {
        let swapped = i32::from_be_bytes([b[0], b[1], b[2], b[3]]);
        if swapped == HEADER_SIZE as i32 {
            return Err(Error::UnsupportedEndianness);
        }
        if sizeof_hdr != HEADER_SIZE as i32 {
            return Err(Error::BadMagic(format!("NIfTI header size {sizeof_hdr}")));
        }
    }
    if ndim != 3 {
        return Err(Error::UnsupportedDim(ndim));
    }
    let datatype = i16_at(b, 70);
    let width = match datatype {
        DT_INT16 => 2,
        DT_FLOAT32 => 4,
        other => return Err(Error::UnsupportedDatatype(other)),
    };
    let dims = [1, 2, 3].map(|i| i16_at(b, 40 + 2 * i));
    if dims.iter().any(|&d| d < 1) {
        return Err(Error::ShapeMismatch(format!("NIfTI dimensions {dims:?}")));
    }
    let shape = dims.map(|d| d as usize);
    // A zero or missing pixdim means the spacing is unknown; 1 mm is assumed.
    let spacing = [1, 2, 3].map(|i| {
        let s = f64::from(f32_at(b, 76 + 4 * i)).abs();
        if s > 0.0 && s.is_finite() { s } else { 1.0 }
    });
    let offset = f32_at(b, 108);
    let offset = if offset >= HEADER_SIZE as f32 { offset as usize } else { 352 };
    let slope = f32_at(b, 112);
    let inter = f32_at(b, 116);
    let slope = if slope == 0.0 || !slope.is_finite() { 1.0 } else { f64::from(slope) };
    let inter = if inter.is_finite() { f64::from(inter) } else { 0.0 };

    let count: usize = shape.iter().product();
    let end = offset + count * width;
    if b.len() < end {
        return Err(Error::TruncatedFile(format!("NIfTI data needs {end} bytes, file has {}", b.len())));
    }
    let payload = &b[offset..end];
    let data: Vec<f32> = match datatype {
        DT_INT16 => payload
            .chunks_exact(2)
            .map(|c| (f64::from(i16::from_le_bytes([c[0], c[1]])) * slope + inter) as f32)
            .collect(),
        _ => payload
            .chunks_exact(4)
            .map(|c| (f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])) * slope + inter) as f32)
            .collect(),
    };
    let meta = VolumeMeta { shape, spacing, kind: ValueKind::HuI16 };
    Ok((Volume::new(shape, data)?, meta))
}
