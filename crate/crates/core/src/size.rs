//! Storage accounting from tensor shapes alone: how big a base model is and
//! how big its 1-bit delta would be.

use serde::Serialize;

use crate::checkpoint::OriginDtype;
use crate::config::{layer_name, ToyArchConfig};
use crate::delta::packed_len;
use crate::error::{Error, Result};

/// Decoder-only transformer dimensions, enough to enumerate every tensor.
/// `kv_dim` is the width of the key/value projections (smaller than
/// `hidden` under grouped-query attention).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArchShape {
    pub name: String,
    pub hidden: usize,
    pub n_layers: usize,
    pub intermediate: usize,
    pub vocab: usize,
    pub kv_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TensorShape {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub quantized: bool,
}

impl TensorShape {
    pub fn params(&self) -> usize {
        self.rows * self.cols
    }
}

pub const PRESET_NAMES: [&str; 4] = ["llama2-7b", "llama2-13b", "llama2-70b", "mistral-7b"];

impl ArchShape {
    pub fn preset(name: &str) -> Result<Self> {
        let (hidden, n_layers, intermediate, vocab, kv_dim) = match name {
            "llama2-7b" => (4096, 32, 11008, 32000, 4096),
            "llama2-13b" => (5120, 40, 13824, 32000, 5120),
            "llama2-70b" => (8192, 80, 28672, 32000, 1024),
            "mistral-7b" => (4096, 32, 14336, 32000, 1024),
            other => {
                return Err(Error::Invalid(format!(
                    "unknown preset `{other}` (known: {})",
                    PRESET_NAMES.join(", ")
                )))
            }
        };
        Ok(ArchShape {
            name: name.to_string(),
            hidden,
            n_layers,
            intermediate,
            vocab,
            kv_dim,
        })
    }

    pub fn from_config(name: &str, cfg: &ToyArchConfig) -> Self {
        ArchShape {
            name: name.to_string(),
            hidden: cfg.dim,
            n_layers: cfg.n_layers,
            intermediate: cfg.intermediate,
            vocab: cfg.vocab,
            kv_dim: cfg.dim,
        }
    }

    /// Every tensor, flagged by the default block-linear policy.
    pub fn tensors(&self) -> Vec<TensorShape> {
        let t = |name: String, rows, cols, quantized| TensorShape {
            name,
            rows,
            cols,
            quantized,
        };
        let (d, f, kv) = (self.hidden, self.intermediate, self.kv_dim);
        let mut out = vec![t("embed".into(), self.vocab, d, false)];
        for i in 0..self.n_layers {
            out.push(t(layer_name(i, "norm1"), 1, d, false));
            out.push(t(layer_name(i, "attn_q"), d, d, true));
            out.push(t(layer_name(i, "attn_k"), kv, d, true));
            out.push(t(layer_name(i, "attn_v"), kv, d, true));
            out.push(t(layer_name(i, "attn_o"), d, d, true));
            out.push(t(layer_name(i, "norm2"), 1, d, false));
            out.push(t(layer_name(i, "mlp_gate"), f, d, true));
            out.push(t(layer_name(i, "mlp_up"), f, d, true));
            out.push(t(layer_name(i, "mlp_down"), d, f, true));
        }
        out.push(t("final_norm".into(), 1, d, false));
        out.push(t("lm_head".into(), self.vocab, d, false));
        out
    }

    /// Bytes of one layer's key/value cache entry per token at `f32`.
    pub fn kv_bytes_per_token(&self) -> usize {
        self.n_layers * 2 * self.kv_dim * 4
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompressionReport {
    pub name: String,
    pub base_bytes: u64,
    pub delta_bytes: u64,
    pub factor: f64,
    pub quantized_params: u64,
    pub unquantized_params: u64,
}

/// Base at origin width versus delta at one bit per quantized parameter per
/// plane (plus a 4-byte scale per plane) and origin width elsewhere.
pub fn compression_report_for(
    name: &str,
    tensors: &[TensorShape],
    origin: OriginDtype,
    planes: usize,
) -> CompressionReport {
    let width = origin.bytes_per_param() as u64;
    let mut base_bytes = 0u64;
    let mut delta_bytes = 0u64;
    let mut quantized_params = 0u64;
    let mut unquantized_params = 0u64;
    for t in tensors {
        let p = t.params() as u64;
        base_bytes += p * width;
        if t.quantized {
            quantized_params += p;
            delta_bytes += planes as u64 * (packed_len(t.rows, t.cols) as u64 + 4);
        } else {
            unquantized_params += p;
            delta_bytes += p * width;
        }
    }
    let factor = if delta_bytes == 0 {
        0.0
    } else {
        base_bytes as f64 / delta_bytes as f64
    };
    CompressionReport {
        name: name.to_string(),
        base_bytes,
        delta_bytes,
        factor,
        quantized_params,
        unquantized_params,
    }
}

pub fn compression_report(shape: &ArchShape, origin: OriginDtype) -> CompressionReport {
    compression_report_for(&shape.name, &shape.tensors(), origin, 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn factor(name: &str) -> f64 {
        compression_report(&ArchShape::preset(name).unwrap(), OriginDtype::F16).factor
    }

    #[test]
    fn presets_land_near_reported_factors() {
        for (name, reported) in [
            ("llama2-7b", 10.87),
            ("llama2-13b", 12.45),
            ("llama2-70b", 15.41),
            ("mistral-7b", 11.14),
        ] {
            let f = factor(name);
            assert!((f - reported).abs() <= 0.1 * reported, "{name}: {f}");
        }
    }

    #[test]
    fn base_size_matches_parameter_count() {
        let r = compression_report(&ArchShape::preset("llama2-7b").unwrap(), OriginDtype::F16);
        // 6.74B parameters at two bytes each.
        assert_eq!(r.base_bytes, 2 * (r.quantized_params + r.unquantized_params));
        assert!((r.base_bytes as f64 / 1e9 - 13.48).abs() < 0.01);
    }

    #[test]
    fn all_quantized_is_sixteen_fold() {
        let tensors = vec![TensorShape {
            name: "w".into(),
            rows: 1024,
            cols: 1024,
            quantized: true,
        }];
        let r = compression_report_for("w", &tensors, OriginDtype::F16, 1);
        assert!((r.factor - 16.0).abs() < 1e-3, "{}", r.factor);
    }

    #[test]
    fn unknown_preset() {
        assert!(ArchShape::preset("gpt-5").is_err());
    }
}
