//! Versioned checkpoint container.
//!
//! Layout: the magic `CAPSOSR\0`, a little-endian `u32` format version, a
//! little-endian `u64` header length, a JSON header, then the concatenated
//! little-endian tensor payloads in header order.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::detector::{ClassGaussianFit, Thresholds};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"CAPSOSR\0";
pub const FORMAT_VERSION: u32 = 1;

/// A named array as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct StoredTensor {
    pub dtype: DType,
    pub shape: Vec<usize>,
    /// Little-endian element bytes.
    pub bytes: Vec<u8>,
}

impl StoredTensor {
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let flat = t.flatten_all()?;
        let bytes = match t.dtype() {
            DType::F32 => flat.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
            DType::F64 => flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
            other => return Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
        };
        Ok(StoredTensor {
            dtype: t.dtype(),
            shape: t.dims().to_vec(),
            bytes,
        })
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        let dev = Device::Cpu;
        Ok(match self.dtype {
            DType::F32 => {
                let v: Vec<f32> = self
                    .bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                Tensor::from_vec(v, self.shape.as_slice(), &dev)?
            }
            DType::F64 => {
                let v: Vec<f64> = self
                    .bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                Tensor::from_vec(v, self.shape.as_slice(), &dev)?
            }
            other => return Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    /// Optimizer steps taken so far.
    pub step: u64,
    /// Known classes of the training split, in label order.
    pub known_classes: Vec<usize>,
    /// Model parameters and optimizer moments by name.
    pub tensors: BTreeMap<String, StoredTensor>,
    /// Per-parameter optimizer step counts.
    pub optimizer_steps: BTreeMap<String, u64>,
    pub last_loss: Option<f64>,
    pub thresholds: Option<Thresholds>,
    pub class_fits: Option<ClassGaussianFit>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ExperimentConfig,
    step: u64,
    known_classes: Vec<usize>,
    optimizer_steps: BTreeMap<String, u64>,
    last_loss: Option<f64>,
    thresholds: Option<Thresholds>,
    class_fits: Option<ClassGaussianFit>,
    tensors: Vec<TensorEntry>,
}

fn dtype_name(dtype: DType) -> Result<&'static str> {
    match dtype {
        DType::F32 => Ok("f32"),
        DType::F64 => Ok("f64"),
        other => Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    }
}

fn parse_dtype(name: &str) -> Result<(DType, usize)> {
    match name {
        "f32" => Ok((DType::F32, 4)),
        "f64" => Ok((DType::F64, 8)),
        other => Err(Error::Checkpoint(format!("unknown dtype `{other}`"))),
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                dtype: dtype_name(t.dtype)?.to_string(),
                shape: t.shape.clone(),
                offset,
                len: t.bytes.len() as u64,
            });
            offset += t.bytes.len() as u64;
        }
        let header = Header {
            config: self.config.clone(),
            step: self.step,
            known_classes: self.known_classes.clone(),
            optimizer_steps: self.optimizer_steps.clone(),
            last_loss: self.last_loss,
            thresholds: self.thresholds.clone(),
            class_fits: self.class_fits.clone(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.tensors.values() {
            out.extend_from_slice(&t.bytes);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Checkpoint(msg.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version}, this build reads {FORMAT_VERSION}"
            )));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..).ok_or_else(|| bad("truncated header"))?;
        if body.len() < header_len {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[..header_len])
            .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        let payload = &body[header_len..];
        let mut tensors = BTreeMap::new();
        let mut expected_end = 0u64;
        for e in header.tensors {
            let (dtype, width) = parse_dtype(&e.dtype)?;
            let count: usize = e.shape.iter().product();
            if e.len != (count * width) as u64 || e.offset != expected_end {
                return Err(Error::Checkpoint(format!("inconsistent entry for {}", e.name)));
            }
            let end = (e.offset + e.len) as usize;
            let data = payload
                .get(e.offset as usize..end)
                .ok_or_else(|| Error::Checkpoint(format!("payload of {} is truncated", e.name)))?;
            expected_end = end as u64;
            tensors.insert(
                e.name,
                StoredTensor {
                    dtype,
                    shape: e.shape,
                    bytes: data.to_vec(),
                },
            );
        }
        if expected_end as usize != payload.len() {
            return Err(bad("trailing bytes after tensor payload"));
        }
        Ok(Checkpoint {
            config: header.config,
            step: header.step,
            known_classes: header.known_classes,
            tensors,
            optimizer_steps: header.optimizer_steps,
            last_loss: header.last_loss,
            thresholds: header.thresholds,
            class_fits: header.class_fits,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
