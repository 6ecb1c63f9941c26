//! Safetensors container I/O and the in-memory checkpoint type.
//!
//! Layout: an 8-byte little-endian header length `N`, `N` bytes of JSON
//! mapping tensor names to `{dtype, shape, data_offsets}` (plus an optional
//! `__metadata__` string map), then one contiguous byte buffer. Offsets are
//! relative to the start of that buffer.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::ToyArchConfig;
use crate::error::{Error, Result};
use crate::tensor::DenseMatrix;

const METADATA_KEY: &str = "__metadata__";
const CONFIG_KEY: &str = "config";

/// Element types the container understands. `I8` is only accepted through
/// the quantized-base loader.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dtype {
    F32,
    F16,
    I8,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F16 => 2,
            Dtype::I8 => 1,
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "F32" => Some(Dtype::F32),
            "F16" => Some(Dtype::F16),
            "I8" => Some(Dtype::I8),
            _ => None,
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            Dtype::F32 => "F32",
            Dtype::F16 => "F16",
            Dtype::I8 => "I8",
        }
    }
}

/// Width the weights had before they were widened to `f32` on load.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OriginDtype {
    F32,
    F16,
}

impl OriginDtype {
    pub fn bytes_per_param(self) -> usize {
        match self {
            OriginDtype::F32 => 4,
            OriginDtype::F16 => 2,
        }
    }
}

/// A tensor exactly as it sits in the file.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

impl RawTensor {
    pub fn from_f32(m: &DenseMatrix) -> Self {
        let mut bytes = Vec::with_capacity(m.len() * 4);
        for v in m.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        RawTensor {
            dtype: Dtype::F32,
            shape: vec![m.rows(), m.cols()],
            bytes,
        }
    }

    /// Interprets the shape as a matrix: scalars are `1×1`, vectors `1×n`.
    pub fn matrix_shape(&self, name: &str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [] => Ok((1, 1)),
            [n] => Ok((1, *n)),
            [r, c] => Ok((*r, *c)),
            other => Err(Error::BadTensor {
                tensor: name.to_string(),
                reason: format!("rank-{} tensors are not supported", other.len()),
            }),
        }
    }

    pub(crate) fn to_dense(&self, name: &str) -> Result<DenseMatrix> {
        let (rows, cols) = self.matrix_shape(name)?;
        let data: Vec<f32> = match self.dtype {
            Dtype::F32 => self
                .bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
            Dtype::F16 => self
                .bytes
                .chunks_exact(2)
                .map(|c| half::f16::from_le_bytes([c[0], c[1]]).to_f32())
                .collect(),
            Dtype::I8 => {
                return Err(Error::UnsupportedDtype {
                    tensor: name.to_string(),
                    dtype: "I8".into(),
                })
            }
        };
        DenseMatrix::new(rows, cols, data)
    }
}

#[derive(Debug, Default, Clone, PartialEq)]
pub struct SafetensorsFile {
    pub tensors: BTreeMap<String, RawTensor>,
    pub metadata: BTreeMap<String, String>,
}

#[derive(Serialize)]
struct HeaderEntry<'a> {
    dtype: &'a str,
    shape: &'a [usize],
    data_offsets: [usize; 2],
}

impl SafetensorsFile {
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::HeaderOverrun {
                declared: 8,
                available: bytes.len() as u64,
            });
        }
        let n = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
        let available = (bytes.len() - 8) as u64;
        if n > available {
            return Err(Error::HeaderOverrun { declared: n, available });
        }
        let header_end = 8 + n as usize;
        let header: serde_json::Map<String, Value> = serde_json::from_slice(&bytes[8..header_end])
            .map_err(|e| Error::HeaderJson(e.to_string()))?;
        let buffer = &bytes[header_end..];

        let mut metadata = BTreeMap::new();
        let mut spans: Vec<(usize, usize, String)> = Vec::new();
        let mut tensors = BTreeMap::new();
        for (name, entry) in header {
            if name == METADATA_KEY {
                let map = entry
                    .as_object()
                    .ok_or_else(|| Error::HeaderJson("__metadata__ must be an object".into()))?;
                for (k, v) in map {
                    let v = v
                        .as_str()
                        .ok_or_else(|| Error::HeaderJson(format!("metadata `{k}` must be a string")))?;
                    metadata.insert(k.clone(), v.to_string());
                }
                continue;
            }
            let bad_json = |reason: &str| Error::HeaderJson(format!("tensor `{name}`: {reason}"));
            let dtype_str = entry
                .get("dtype")
                .and_then(Value::as_str)
                .ok_or_else(|| bad_json("missing dtype"))?;
            let dtype = Dtype::parse(dtype_str).ok_or_else(|| Error::UnsupportedDtype {
                tensor: name.clone(),
                dtype: dtype_str.to_string(),
            })?;
            let shape: Vec<usize> = entry
                .get("shape")
                .and_then(Value::as_array)
                .ok_or_else(|| bad_json("missing shape"))?
                .iter()
                .map(|d| d.as_u64().map(|d| d as usize))
                .collect::<Option<_>>()
                .ok_or_else(|| bad_json("shape must hold non-negative integers"))?;
            let offsets: Vec<u64> = entry
                .get("data_offsets")
                .and_then(Value::as_array)
                .ok_or_else(|| bad_json("missing data_offsets"))?
                .iter()
                .map(Value::as_u64)
                .collect::<Option<_>>()
                .ok_or_else(|| bad_json("data_offsets must hold non-negative integers"))?;
            let [begin, end] = offsets[..] else {
                return Err(bad_json("data_offsets must have two entries"));
            };
            let bad_offsets = |reason: String| Error::BadOffsets {
                tensor: name.clone(),
                reason,
            };
            if begin > end {
                return Err(bad_offsets(format!("begin {begin} > end {end}")));
            }
            if end > buffer.len() as u64 {
                return Err(bad_offsets(format!(
                    "end {end} beyond buffer of {} bytes",
                    buffer.len()
                )));
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| bad_json("shape overflows"))?;
            let expected = numel * dtype.size();
            if (end - begin) as usize != expected {
                return Err(bad_offsets(format!(
                    "span of {} bytes, shape {shape:?} needs {expected}",
                    end - begin
                )));
            }
            let (begin, end) = (begin as usize, end as usize);
            spans.push((begin, end, name.clone()));
            tensors.insert(
                name,
                RawTensor {
                    dtype,
                    shape,
                    bytes: buffer[begin..end].to_vec(),
                },
            );
        }
        spans.sort();
        for pair in spans.windows(2) {
            let (_, prev_end, _) = &pair[0];
            let (begin, _, name) = &pair[1];
            if begin < prev_end {
                return Err(Error::BadOffsets {
                    tensor: name.clone(),
                    reason: format!("overlaps `{}`", pair[0].2),
                });
            }
        }
        Ok(SafetensorsFile { tensors, metadata })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = serde_json::Map::new();
        if !self.metadata.is_empty() {
            header.insert(
                METADATA_KEY.to_string(),
                serde_json::to_value(&self.metadata).expect("string map"),
            );
        }
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            let entry = HeaderEntry {
                dtype: t.dtype.as_str(),
                shape: &t.shape,
                data_offsets: [offset, offset + t.bytes.len()],
            };
            header.insert(name.clone(), serde_json::to_value(entry).expect("header entry"));
            offset += t.bytes.len();
        }
        let mut json = serde_json::to_vec(&header).expect("header");
        // Pad with spaces so the data buffer starts 8-byte aligned.
        while !(8 + json.len()).is_multiple_of(8) {
            json.push(b' ');
        }
        let mut out = Vec::with_capacity(8 + json.len() + offset);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.tensors.values() {
            out.extend_from_slice(&t.bytes);
        }
        out
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&bytes)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Named tensors plus (optionally) the architecture they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub tensors: BTreeMap<String, DenseMatrix>,
    pub config: Option<ToyArchConfig>,
    pub origin: OriginDtype,
}

impl ModelCheckpoint {
    pub fn new(tensors: BTreeMap<String, DenseMatrix>, config: Option<ToyArchConfig>) -> Result<Self> {
        let ckpt = ModelCheckpoint {
            tensors,
            config,
            origin: OriginDtype::F32,
        };
        ckpt.validate()?;
        Ok(ckpt)
    }

    /// Checks that every tensor the config requires is present with the
    /// config-implied shape.
    pub fn validate(&self) -> Result<()> {
        let Some(cfg) = &self.config else {
            return Ok(());
        };
        cfg.validate()?;
        for (name, shape) in cfg.tensor_shapes() {
            let t = self
                .tensors
                .get(&name)
                .ok_or_else(|| Error::MissingTensor(name.clone()))?;
            if t.shape() != shape {
                return Err(Error::ShapeMismatch {
                    name,
                    expected: shape,
                    got: t.shape(),
                });
            }
        }
        Ok(())
    }

    pub fn tensor(&self, name: &str) -> Result<&DenseMatrix> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn config(&self) -> Result<&ToyArchConfig> {
        self.config
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig("checkpoint carries no architecture config".into()))
    }

    pub fn param_count(&self) -> usize {
        self.tensors.values().map(DenseMatrix::len).sum()
    }

    /// Bytes the parameters occupy at their origin width.
    pub fn payload_bytes(&self) -> usize {
        self.param_count() * self.origin.bytes_per_param()
    }

    /// Checks that `other` has exactly the same tensor names and shapes.
    pub fn check_compatible(&self, other: &ModelCheckpoint) -> Result<()> {
        for (name, t) in &self.tensors {
            let o = other
                .tensors
                .get(name)
                .ok_or_else(|| Error::MissingTensor(name.clone()))?;
            if o.shape() != t.shape() {
                return Err(Error::ShapeMismatch {
                    name: name.clone(),
                    expected: t.shape(),
                    got: o.shape(),
                });
            }
        }
        if let Some(extra) = other.tensors.keys().find(|k| !self.tensors.contains_key(*k)) {
            return Err(Error::UnexpectedTensor(extra.clone()));
        }
        Ok(())
    }

    pub fn from_safetensors(file: &SafetensorsFile) -> Result<Self> {
        let mut tensors = BTreeMap::new();
        let mut origin = OriginDtype::F32;
        for (name, raw) in &file.tensors {
            if raw.dtype == Dtype::F16 {
                origin = OriginDtype::F16;
            }
            tensors.insert(name.clone(), raw.to_dense(name)?);
        }
        let config = config_from_metadata(&file.metadata)?;
        let ckpt = ModelCheckpoint {
            tensors,
            config,
            origin,
        };
        ckpt.validate()?;
        Ok(ckpt)
    }

    /// All tensors written as `F32`, `[rows, cols]`.
    pub fn to_safetensors(&self) -> SafetensorsFile {
        let mut metadata = BTreeMap::new();
        if let Some(cfg) = &self.config {
            metadata.insert(CONFIG_KEY.to_string(), serde_json::to_string(cfg).expect("config"));
        }
        SafetensorsFile {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), RawTensor::from_f32(v)))
                .collect(),
            metadata,
        }
    }
}

pub(crate) fn config_from_metadata(metadata: &BTreeMap<String, String>) -> Result<Option<ToyArchConfig>> {
    metadata
        .get(CONFIG_KEY)
        .map(|s| serde_json::from_str::<ToyArchConfig>(s))
        .transpose()
        .map_err(|e| Error::HeaderJson(format!("config metadata: {e}")))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelCheckpoint> {
    ModelCheckpoint::from_safetensors(&SafetensorsFile::read(path)?)
}

pub fn save_checkpoint(ckpt: &ModelCheckpoint, path: &Path) -> Result<()> {
    ckpt.to_safetensors().write(path)
}
