//! BNC1 sparse triplet cache.
//!
//! Layout (little-endian): magic `BNC1`; u32 version; u8 has_labels; u64 N;
//! u32 C; 3N i32 coordinates (x, y, z per row); N·C f32 features; N u16
//! labels when flagged; u64 FNV-1a over all preceding bytes. An empty tensor
//! is 29 bytes.

use std::path::Path;

use super::bytes::{f32s_from_le, ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::voxgrid::SparseTensor;

const MAGIC: &[u8; 4] = b"BNC1";
pub const CACHE_VERSION: u32 = 1;

pub fn encode_cache<T: Real>(st: &SparseTensor<T>) -> Result<Vec<u8>> {
    let mut w = ByteWriter::default();
    w.bytes(MAGIC);
    w.u32(CACHE_VERSION);
    w.u8(u8::from(st.labels().is_some()));
    w.u64(st.len() as u64);
    w.u32(u32::try_from(st.channels()).map_err(|_| Error::InvalidConfig("too many channels".into()))?);
    for c in st.coords() {
        for v in c.to_array() {
            w.i32(v);
        }
    }
    for v in st.features() {
        w.f32(v.to_f64_lossy() as f32);
    }
    if let Some(labels) = st.labels() {
        for &l in labels {
            w.u16(l);
        }
    }
    Ok(w.finish())
}

pub fn decode_cache(data: &[u8]) -> Result<SparseTensor<f32>> {
    let mut r = ByteReader::new(data, "cache");
    if r.take(4).map_err(|_| Error::BadMagic("cache".into()))? != MAGIC {
        return Err(Error::BadMagic("cache".into()));
    }
    let version = r.u32()?;
    if version != CACHE_VERSION {
        return Err(Error::VersionMismatch { found: version, expected: CACHE_VERSION });
    }
    let has_labels = match r.u8()? {
        0 => false,
        1 => true,
        other => return Err(Error::ShapeMismatch(format!("label flag {other}"))),
    };
    let n = usize::try_from(r.u64()?).map_err(|_| Error::TruncatedFile("row count exceeds memory".into()))?;
    let c = r.u32()? as usize;
    let too_big = || Error::TruncatedFile(format!("cache claims {n} rows of {c} channels"));
    let coord_bytes = r.take(n.checked_mul(12).ok_or_else(too_big)?)?;
    let feature_bytes = r.take(n.checked_mul(c).and_then(|v| v.checked_mul(4)).ok_or_else(too_big)?)?;
    let label_bytes = if has_labels { Some(r.take(n * 2)?) } else { None };
    r.verify_checksum()?;

    let coords = coord_bytes
        .chunks_exact(12)
        .map(|b| {
            let v = |i: usize| i32::from_le_bytes([b[i], b[i + 1], b[i + 2], b[i + 3]]);
            crate::voxgrid::VoxelCoord::new(v(0), v(4), v(8))
        })
        .collect();
    let st = if n == 0 {
        SparseTensor::empty(c)
    } else {
        SparseTensor::new(coords, f32s_from_le(feature_bytes), c)?
    };
    match label_bytes {
        Some(b) => st.with_labels(b.chunks_exact(2).map(|p| u16::from_le_bytes([p[0], p[1]])).collect()),
        None => Ok(st),
    }
}

pub fn write_cache<T: Real>(path: impl AsRef<Path>, st: &SparseTensor<T>) -> Result<()> {
    std::fs::write(path, encode_cache(st)?)?;
    Ok(())
}

pub fn read_cache(path: impl AsRef<Path>) -> Result<SparseTensor<f32>> {
    decode_cache(&std::fs::read(path)?)
}
