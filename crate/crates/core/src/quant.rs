//! 8-bit round-to-nearest quantization of base weights, and composing a
//! quantized base with a high-precision delta.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::checkpoint::{config_from_metadata, Dtype, ModelCheckpoint, OriginDtype, RawTensor, SafetensorsFile};
use crate::config::ToyArchConfig;
use crate::delta_file::{DeltaFile, QuantPolicy};
use crate::error::{Error, Result};
use crate::model::{BaseModel, BaseWeight, ModelView};
use crate::tensor::{dot, DenseMatrix};

/// Symmetric per-row INT8 weights: `w_ij ≈ values_ij · row_scales_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Int8Tensor {
    rows: usize,
    cols: usize,
    values: Vec<i8>,
    row_scales: Vec<f32>,
}

/// Smallest `s` with `fl(127·s) ≥ max_abs`. Choosing the minimum makes the
/// scale a fixed point of quantize∘dequantize.
fn row_scale(max_abs: f32) -> f32 {
    if max_abs == 0.0 {
        return 0.0;
    }
    let mut s = max_abs / 127.0;
    while 127.0 * s < max_abs {
        s = s.next_up();
    }
    loop {
        let prev = s.next_down();
        if prev > 0.0 && 127.0 * prev >= max_abs {
            s = prev;
        } else {
            break;
        }
    }
    s
}

impl Int8Tensor {
    pub fn new(rows: usize, cols: usize, values: Vec<i8>, row_scales: Vec<f32>) -> Result<Self> {
        if values.len() != rows * cols || row_scales.len() != rows {
            return Err(Error::Invalid(format!(
                "int8 tensor {rows}x{cols} with {} values and {} scales",
                values.len(),
                row_scales.len()
            )));
        }
        if values.contains(&i8::MIN) {
            return Err(Error::Invalid("int8 values must lie in [-127, 127]".into()));
        }
        if row_scales.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::Invalid("row scales must be finite and non-negative".into()));
        }
        Ok(Self {
            rows,
            cols,
            values,
            row_scales,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn values(&self) -> &[i8] {
        &self.values
    }

    pub fn row_scales(&self) -> &[f32] {
        &self.row_scales
    }

    /// One byte per value plus four per row scale.
    pub fn storage_bytes(&self) -> usize {
        self.values.len() + 4 * self.row_scales.len()
    }

    /// `x · Wᵀ` straight from the integer codes.
    pub fn matmul_t(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        if x.cols() != self.cols {
            return Err(Error::DimensionMismatch {
                op: "int8 matmul_t",
                left: x.shape(),
                right: self.shape(),
            });
        }
        let mut out = DenseMatrix::zeros(x.rows(), self.rows);
        let mut w = vec![0.0f32; self.cols];
        for i in 0..self.rows {
            for (wj, &q) in w.iter_mut().zip(&self.values[i * self.cols..(i + 1) * self.cols]) {
                *wj = q as f32;
            }
            for t in 0..x.rows() {
                out.row_mut(t)[i] = dot(x.row(t), &w) * self.row_scales[i];
            }
        }
        Ok(out)
    }
}

/// Per-row symmetric RTN: `s = max|row| / 127`, `q = round_ties_even(w / s)`.
pub fn rtn_quantize(w: &DenseMatrix) -> Int8Tensor {
    let (rows, cols) = w.shape();
    let mut values = Vec::with_capacity(rows * cols);
    let mut row_scales = Vec::with_capacity(rows);
    for i in 0..rows {
        let row = w.row(i);
        let s = row_scale(row.iter().fold(0.0f32, |m, v| m.max(v.abs())));
        row_scales.push(s);
        for &v in row {
            let q = if s == 0.0 {
                0
            } else {
                ((v as f64) / (s as f64)).round_ties_even().clamp(-127.0, 127.0) as i8
            };
            values.push(q);
        }
    }
    Int8Tensor {
        rows,
        cols,
        values,
        row_scales,
    }
}

pub fn rtn_dequantize(q: &Int8Tensor) -> DenseMatrix {
    DenseMatrix::from_fn(q.rows, q.cols, |i, j| q.values[i * q.cols + j] as f32 * q.row_scales[i])
}

/// A checkpoint whose policy-selected matrices are INT8; the rest stay `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedCheckpoint {
    pub config: Option<ToyArchConfig>,
    pub quantized: BTreeMap<String, Int8Tensor>,
    pub dense: BTreeMap<String, DenseMatrix>,
}

pub fn quantize_checkpoint(ckpt: &ModelCheckpoint, policy: &QuantPolicy) -> QuantizedCheckpoint {
    let mut quantized = BTreeMap::new();
    let mut dense = BTreeMap::new();
    for (name, t) in &ckpt.tensors {
        if policy.matches(name, t.shape()) {
            quantized.insert(name.clone(), rtn_quantize(t));
        } else {
            dense.insert(name.clone(), t.clone());
        }
    }
    QuantizedCheckpoint {
        config: ckpt.config,
        quantized,
        dense,
    }
}

/// Sidecar holding the row scales of every `I8` tensor.
pub fn scales_sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".scales.json");
    PathBuf::from(s)
}

impl QuantizedCheckpoint {
    /// Dense view of everything, with INT8 tensors dequantized.
    pub fn dequantize(&self) -> ModelCheckpoint {
        let mut tensors = self.dense.clone();
        for (name, q) in &self.quantized {
            tensors.insert(name.clone(), rtn_dequantize(q));
        }
        ModelCheckpoint {
            tensors,
            config: self.config,
            origin: OriginDtype::F32,
        }
    }

    pub fn storage_bytes(&self) -> usize {
        self.quantized.values().map(Int8Tensor::storage_bytes).sum::<usize>()
            + self.dense.values().map(|m| m.len() * 4).sum::<usize>()
    }

    pub fn base_model(&self) -> Result<BaseModel> {
        let config = self
            .config
            .ok_or_else(|| Error::InvalidConfig("quantized checkpoint carries no config".into()))?;
        let mut tensors = BTreeMap::new();
        for (name, q) in &self.quantized {
            tensors.insert(name.clone(), Arc::new(BaseWeight::Int8(q.clone())));
        }
        for (name, d) in &self.dense {
            tensors.insert(name.clone(), Arc::new(BaseWeight::Dense(d.clone())));
        }
        BaseModel::new(config, tensors)
    }

    /// Writes `I8` codes into a safetensors container at `path` and the row
    /// scales into the `.scales.json` sidecar next to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        let plain = ModelCheckpoint {
            tensors: self.dense.clone(),
            config: self.config,
            origin: OriginDtype::F32,
        };
        let mut file = plain.to_safetensors();
        file.metadata.insert("format".into(), "rtn-int8".into());
        let mut sidecar = BTreeMap::new();
        for (name, q) in &self.quantized {
            file.tensors.insert(
                name.clone(),
                RawTensor {
                    dtype: Dtype::I8,
                    shape: vec![q.rows, q.cols],
                    bytes: q.values.iter().map(|&v| v as u8).collect(),
                },
            );
            sidecar.insert(name.clone(), q.row_scales.iter().map(|&s| s as f64).collect::<Vec<_>>());
        }
        file.write(path)?;
        let side = scales_sidecar_path(path);
        let json = serde_json::to_vec_pretty(&sidecar).expect("scales");
        std::fs::write(&side, json).map_err(|e| Error::io(side, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut file = SafetensorsFile::read(path)?;
        let side = scales_sidecar_path(path);
        let text = std::fs::read(&side).map_err(|e| Error::io(&side, e))?;
        let scales: BTreeMap<String, Vec<f64>> =
            serde_json::from_slice(&text).map_err(|e| Error::HeaderJson(format!("{}: {e}", side.display())))?;
        let int8_names: Vec<String> = file
            .tensors
            .iter()
            .filter(|(_, t)| t.dtype == Dtype::I8)
            .map(|(n, _)| n.clone())
            .collect();
        let mut quantized = BTreeMap::new();
        for name in int8_names {
            let raw = file.tensors.remove(&name).expect("listed above");
            let (rows, cols) = raw.matrix_shape(&name)?;
            let s = scales
                .get(&name)
                .ok_or_else(|| Error::MissingTensor(format!("row scales for `{name}`")))?;
            let q = Int8Tensor::new(
                rows,
                cols,
                raw.bytes.iter().map(|&b| b as i8).collect(),
                s.iter().map(|&v| v as f32).collect(),
            )
            .map_err(|e| Error::BadTensor {
                tensor: name.clone(),
                reason: e.to_string(),
            })?;
            quantized.insert(name, q);
        }
        let mut dense = BTreeMap::new();
        for (name, raw) in &file.tensors {
            dense.insert(name.clone(), raw.to_dense(name)?);
        }
        let q = QuantizedCheckpoint {
            config: config_from_metadata(&file.metadata)?,
            quantized,
            dense,
        };
        if q.config.is_some() {
            q.base_model()?;
        }
        Ok(q)
    }
}

/// Views computing `dequant(W_base) + Δ̂` per layer, reading the INT8 codes
/// directly.
pub fn compose_quantized_base(qbase: &QuantizedCheckpoint, delta: &DeltaFile) -> Result<ModelView> {
    ModelView::decomposed(&qbase.base_model()?, delta)
}
