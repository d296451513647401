//! `BNT1` checkpoint files.
//!
//! Layout (little-endian): magic `BNT1`; u32 version; u32 length + UTF-8 JSON
//! blob (config, dataset stats, seed, optimizer settings, training window); u32 tensor count;
//! per tensor u16 name length, name, u8 ndim, u32 dims, f32 data row-major;
//! trailing u64 FNV-1a over all preceding bytes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdamConfig, OptimState, UNet, UNetConfig};
use crate::error::{Error, Result};
use crate::io_ct::bytes::{f32s_from_le, ByteReader, ByteWriter};
use crate::pipeline::DatasetStats;
use crate::real::Real;

const MAGIC: &[u8; 4] = b"BNT1";
pub const CHECKPOINT_VERSION: u32 = 1;
const MOMENT_PREFIXES: [&str; 2] = ["adam.m.", "adam.v."];

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimSnapshot {
    pub step: u64,
    pub config: AdamConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    config: UNetConfig,
    stats: DatasetStats,
    seed: u64,
    optimizer: Option<OptimSnapshot>,
    #[serde(default)]
    window: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: UNetConfig,
    pub stats: DatasetStats,
    pub seed: u64,
    pub optimizer: Option<OptimSnapshot>,
    /// Window edge used in training, the natural inference window.
    pub window: Option<usize>,
    pub tensors: Vec<NamedTensor>,
}

fn to_f32<T: Real>(values: &[T]) -> Vec<f32> {
    values.iter().map(|v| v.to_f64_lossy() as f32).collect()
}

impl Checkpoint {
    pub fn from_network<T: Real>(net: &UNet<T>, stats: DatasetStats, seed: u64, opt: Option<&OptimState<T>>) -> Self {
        let layout = net.config().parameter_layout();
        let mut tensors: Vec<NamedTensor> = layout
            .iter()
            .zip(net.slots())
            .map(|((name, shape), data)| NamedTensor { name: name.clone(), shape: shape.clone(), data: to_f32(data) })
            .collect();
        if let Some(opt) = opt {
            for (prefix, moments) in MOMENT_PREFIXES.iter().zip([&opt.first_moment, &opt.second_moment]) {
                for ((name, shape), data) in layout.iter().zip(moments) {
                    tensors.push(NamedTensor { name: format!("{prefix}{name}"), shape: shape.clone(), data: to_f32(data) });
                }
            }
        }
        Self {
            config: net.config().clone(),
            stats,
            seed,
            optimizer: opt.map(|o| OptimSnapshot { step: o.step, config: o.config.clone() }),
            window: None,
            tensors,
        }
    }

    fn find(&self, name: &str, shape: &[usize]) -> Result<&NamedTensor> {
        let t = self
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::ShapeMismatch(format!("checkpoint lacks tensor {name}")))?;
        if t.shape != shape || t.data.len() != shape.iter().product::<usize>() {
            return Err(Error::ShapeMismatch(format!(
                "tensor {name} has shape {:?}, config implies {shape:?}",
                t.shape
            )));
        }
        Ok(t)
    }

    /// Every parameter named by the config's layout, with matching shape.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        for (name, shape) in self.config.parameter_layout() {
            self.find(&name, &shape)?;
            if self.optimizer.is_some() {
                for prefix in MOMENT_PREFIXES {
                    self.find(&format!("{prefix}{name}"), &shape)?;
                }
            }
        }
        Ok(())
    }

    pub fn network<T: Real>(&self) -> Result<UNet<T>> {
        let mut net = UNet::<T>::zeros(&self.config)?;
        for ((name, shape), slot) in self.config.parameter_layout().iter().zip(net.slots_mut()) {
            let t = self.find(name, shape)?;
            *slot = t.data.iter().map(|&v| T::from_f64_lossy(f64::from(v))).collect();
        }
        Ok(net)
    }

    pub fn optimizer_state<T: Real>(&self) -> Result<Option<OptimState<T>>> {
        let Some(snapshot) = &self.optimizer else {
            return Ok(None);
        };
        let layout = self.config.parameter_layout();
        let mut moments = [Vec::new(), Vec::new()];
        for (prefix, dst) in MOMENT_PREFIXES.iter().zip(moments.iter_mut()) {
            for (name, shape) in &layout {
                let t = self.find(&format!("{prefix}{name}"), shape)?;
                dst.push(t.data.iter().map(|&v| T::from_f64_lossy(f64::from(v))).collect());
            }
        }
        let [first_moment, second_moment] = moments;
        Ok(Some(OptimState { config: snapshot.config.clone(), step: snapshot.step, first_moment, second_moment }))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            config: self.config.clone(),
            stats: self.stats,
            seed: self.seed,
            optimizer: self.optimizer.clone(),
            window: self.window,
        };
        let blob = serde_json::to_vec(&header)?;
        let mut w = ByteWriter::default();
        w.bytes(MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.u32(len_u32(blob.len(), "config blob")?);
        w.bytes(&blob);
        w.u32(len_u32(self.tensors.len(), "tensor count")?);
        for t in &self.tensors {
            let name = t.name.as_bytes();
            w.u16(u16::try_from(name.len()).map_err(|_| Error::InvalidConfig(format!("tensor name {} too long", t.name)))?);
            w.bytes(name);
            w.u8(u8::try_from(t.shape.len()).map_err(|_| Error::InvalidConfig("too many dimensions".into()))?);
            for &d in &t.shape {
                w.u32(len_u32(d, "dimension")?);
            }
            if t.data.len() != t.shape.iter().product::<usize>() {
                return Err(Error::ShapeMismatch(format!("tensor {} data does not match its shape", t.name)));
            }
            for &v in &t.data {
                w.f32(v);
            }
        }
        Ok(w.finish())
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(data, "checkpoint");
        if r.take(4).map_err(|_| Error::BadMagic("checkpoint".into()))? != MAGIC {
            return Err(Error::BadMagic("checkpoint".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch { found: version, expected: CHECKPOINT_VERSION });
        }
        let blob_len = r.u32()? as usize;
        let header: Header = serde_json::from_slice(r.take(blob_len)?)?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name_len = usize::from(r.u16()?);
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::ShapeMismatch("tensor name is not UTF-8".into()))?;
            let ndim = usize::from(r.u8()?);
            let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let too_big = || Error::TruncatedFile(format!("tensor {name} claims shape {shape:?}"));
            let len = shape.iter().try_fold(4usize, |acc, &d| acc.checked_mul(d)).ok_or_else(too_big)?;
            let bytes = r.take(len)?;
            tensors.push(NamedTensor { name, shape, data: f32s_from_le(bytes) });
        }
        r.verify_checksum()?;
        let ckpt = Self {
            config: header.config,
            stats: header.stats,
            seed: header.seed,
            optimizer: header.optimizer,
            window: header.window,
            tensors,
        };
        ckpt.validate()?;
        Ok(ckpt)
    }
}

fn len_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::InvalidConfig(format!("{what} {n} exceeds u32")))
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    std::fs::write(path, ckpt.to_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}
