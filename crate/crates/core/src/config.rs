//! Architecture description for the Llama-style toy transformer, plus the
//! checkpoint naming convention every module agrees on.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Projection matrices inside one transformer block, in canonical order.
pub const LINEAR_KINDS: [&str; 7] = [
    "attn_q", "attn_k", "attn_v", "attn_o", "mlp_gate", "mlp_up", "mlp_down",
];

fn default_rope_theta() -> f32 {
    10000.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyArchConfig {
    pub vocab: usize,
    pub dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub intermediate: usize,
    pub max_seq: usize,
    #[serde(default = "default_rope_theta")]
    pub rope_theta: f32,
}

impl Default for ToyArchConfig {
    fn default() -> Self {
        Self {
            vocab: 256,
            dim: 64,
            n_layers: 2,
            n_heads: 4,
            intermediate: 172,
            max_seq: 128,
            rope_theta: default_rope_theta(),
        }
    }
}

impl ToyArchConfig {
    /// A wider, small-vocab variant where projection matrices dominate the
    /// parameter count. Used for serving benchmarks.
    pub fn linear_heavy() -> Self {
        Self {
            vocab: 64,
            dim: 256,
            n_layers: 2,
            n_heads: 4,
            intermediate: 688,
            max_seq: 128,
            rope_theta: default_rope_theta(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("vocab", self.vocab),
            ("dim", self.dim),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("intermediate", self.intermediate),
            ("max_seq", self.max_seq),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be at least 1")));
            }
        }
        if !self.dim.is_multiple_of(self.n_heads) {
            return Err(Error::InvalidConfig(format!(
                "dim {} not divisible by n_heads {}",
                self.dim, self.n_heads
            )));
        }
        if !(self.dim / self.n_heads).is_multiple_of(2) {
            return Err(Error::InvalidConfig("head dimension must be even for rotary embeddings".into()));
        }
        if !(self.rope_theta.is_finite() && self.rope_theta > 0.0) {
            return Err(Error::InvalidConfig("rope_theta must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.n_heads
    }

    /// Every tensor the architecture requires, with its `(rows, cols)` shape.
    /// Linear weights are stored `out × in`.
    pub fn tensor_shapes(&self) -> Vec<(String, (usize, usize))> {
        let (d, f) = (self.dim, self.intermediate);
        let mut out = vec![("embed".to_string(), (self.vocab, d))];
        for i in 0..self.n_layers {
            out.push((layer_name(i, "norm1"), (1, d)));
            for kind in ["attn_q", "attn_k", "attn_v", "attn_o"] {
                out.push((layer_name(i, kind), (d, d)));
            }
            out.push((layer_name(i, "norm2"), (1, d)));
            out.push((layer_name(i, "mlp_gate"), (f, d)));
            out.push((layer_name(i, "mlp_up"), (f, d)));
            out.push((layer_name(i, "mlp_down"), (d, f)));
        }
        out.push(("final_norm".to_string(), (1, d)));
        out.push(("lm_head".to_string(), (self.vocab, d)));
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensor_shapes().iter().map(|(_, (r, c))| r * c).sum()
    }
}

pub fn layer_name(layer: usize, kind: &str) -> String {
    format!("layers.{layer}.{kind}")
}

/// Default quantization policy: the attention and MLP projections of each
/// transformer block. Embeddings, the LM head and norms stay full precision.
pub fn is_block_linear(name: &str) -> bool {
    let mut parts = name.split('.');
    matches!(
        (parts.next(), parts.next().map(|p| p.parse::<usize>().is_ok()), parts.next(), parts.next()),
        (Some("layers"), Some(true), Some(kind), None) if LINEAR_KINDS.contains(&kind)
    )
}
