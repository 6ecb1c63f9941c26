//! Minimal Llama-style transformer: embedding, `n_layers` × {RMSNorm,
//! rotary multi-head causal attention, RMSNorm, gated-SiLU MLP}, final
//! RMSNorm, LM head.
//!
//! A [`ModelView`] holds each projection either merged (one dense weight)
//! or decomposed into a shared base weight plus a delta, so the same forward
//! code serves plain checkpoints, `base + 1-bit delta`, low-rank deltas and
//! INT8 bases.

mod backward;
mod decode;
mod forward;
pub mod ops;

use std::collections::BTreeMap;
use std::sync::Arc;

pub use backward::{loss_and_grads, loss_and_grads_with, ParamGrad};
pub use decode::{decode_batch, KvCache};
pub use forward::{forward, forward_with_tape, logit_mse, EffectiveWeights, ForwardTape};

use crate::checkpoint::ModelCheckpoint;
use crate::config::{layer_name, ToyArchConfig, LINEAR_KINDS};
use crate::delta::DeltaStack;
use crate::delta_file::{DeltaEntry, DeltaFile};
use crate::error::{Error, Result};
use crate::lowrank::{LowRankDelta, LowRankEntry, LowRankFile};
use crate::quant::{rtn_dequantize, Int8Tensor};
use crate::tensor::DenseMatrix;

use ops::RopeTable;

/// A base weight as it is held in memory.
#[derive(Debug, Clone, PartialEq)]
pub enum BaseWeight {
    Dense(DenseMatrix),
    Int8(Int8Tensor),
}

impl BaseWeight {
    pub fn shape(&self) -> (usize, usize) {
        match self {
            BaseWeight::Dense(m) => m.shape(),
            BaseWeight::Int8(q) => q.shape(),
        }
    }

    /// `x · Wᵀ`.
    pub fn matmul_t(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        match self {
            BaseWeight::Dense(m) => x.matmul_t(m),
            BaseWeight::Int8(q) => q.matmul_t(x),
        }
    }

    pub fn to_dense(&self) -> DenseMatrix {
        match self {
            BaseWeight::Dense(m) => m.clone(),
            BaseWeight::Int8(q) => rtn_dequantize(q),
        }
    }

    pub fn row(&self, i: usize) -> Vec<f32> {
        match self {
            BaseWeight::Dense(m) => m.row(i).to_vec(),
            BaseWeight::Int8(q) => {
                let s = q.row_scales()[i];
                q.values()[i * q.cols()..(i + 1) * q.cols()].iter().map(|&v| v as f32 * s).collect()
            }
        }
    }

    /// Bytes held in memory: 4 per `f32`, or one per code plus row scales.
    pub fn storage_bytes(&self) -> usize {
        match self {
            BaseWeight::Dense(m) => m.len() * 4,
            BaseWeight::Int8(q) => q.storage_bytes(),
        }
    }
}

/// The part a fine-tune adds on top of a base weight.
#[derive(Debug, Clone, PartialEq)]
pub enum DeltaRepr {
    Stack(DeltaStack),
    Raw(DenseMatrix),
    LowRank(LowRankDelta),
}

impl DeltaRepr {
    pub fn shape(&self) -> (usize, usize) {
        match self {
            DeltaRepr::Stack(s) => s.shape(),
            DeltaRepr::Raw(m) => m.shape(),
            DeltaRepr::LowRank(l) => l.shape(),
        }
    }

    pub fn reconstruct(&self) -> DenseMatrix {
        match self {
            DeltaRepr::Stack(s) => s.reconstruct(),
            DeltaRepr::Raw(m) => m.clone(),
            DeltaRepr::LowRank(l) => l.reconstruct(),
        }
    }

    /// `out_row += Δ x` for one activation row.
    pub fn accumulate_row(&self, x: &[f32], out: &mut [f32]) {
        match self {
            DeltaRepr::Stack(s) => s.matvec_accumulate(x, out),
            DeltaRepr::Raw(m) => {
                for (o, i) in out.iter_mut().zip(0..m.rows()) {
                    *o += crate::tensor::dot(m.row(i), x);
                }
            }
            DeltaRepr::LowRank(l) => {
                let inner: Vec<f32> = (0..l.b.rows()).map(|r| crate::tensor::dot(l.b.row(r), x)).collect();
                for (o, i) in out.iter_mut().zip(0..l.a.rows()) {
                    *o += crate::tensor::dot(l.a.row(i), &inner);
                }
            }
        }
    }

    /// Row `i` of the reconstructed delta.
    pub fn row(&self, i: usize) -> Vec<f32> {
        match self {
            DeltaRepr::Stack(s) => {
                let cols = s.shape().1;
                let mut out = vec![0.0; cols];
                for p in s.planes() {
                    for (j, o) in out.iter_mut().enumerate() {
                        *o += if p.is_positive(i * cols + j) { p.scale() } else { -p.scale() };
                    }
                }
                out
            }
            DeltaRepr::Raw(m) => m.row(i).to_vec(),
            DeltaRepr::LowRank(l) => (0..l.b.cols())
                .map(|j| (0..l.rank()).map(|r| l.a.get(i, r) * l.b.get(r, j)).sum())
                .collect(),
        }
    }

    pub fn storage_bytes(&self) -> usize {
        match self {
            DeltaRepr::Stack(s) => s.storage_bytes(),
            DeltaRepr::Raw(m) => m.len() * 4,
            DeltaRepr::LowRank(l) => l.storage_bytes(),
        }
    }
}

impl From<DeltaEntry> for DeltaRepr {
    fn from(e: DeltaEntry) -> Self {
        match e {
            DeltaEntry::Packed(s) => DeltaRepr::Stack(s),
            DeltaEntry::Raw(m) => DeltaRepr::Raw(m),
        }
    }
}

impl From<LowRankEntry> for DeltaRepr {
    fn from(e: LowRankEntry) -> Self {
        match e {
            LowRankEntry::LowRank(l) => DeltaRepr::LowRank(l),
            LowRankEntry::Raw(m) => DeltaRepr::Raw(m),
        }
    }
}

/// One projection: shared base weight, optional delta.
#[derive(Debug, Clone)]
pub struct LinearView {
    pub base: Arc<BaseWeight>,
    pub delta: Option<DeltaRepr>,
}

impl LinearView {
    pub fn merged(w: DenseMatrix) -> Self {
        Self {
            base: Arc::new(BaseWeight::Dense(w)),
            delta: None,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.base.shape()
    }

    /// Decomposed product `x·W_baseᵀ + x·Δᵀ`; the delta is applied per row
    /// without materializing it.
    pub fn forward(&self, x: &DenseMatrix) -> DenseMatrix {
        let mut y = self.base.matmul_t(x).expect("view shapes checked at construction");
        if let Some(d) = &self.delta {
            for t in 0..x.rows() {
                d.accumulate_row(x.row(t), y.row_mut(t));
            }
        }
        y
    }

    /// Row `i` of `W_base + Δ`.
    pub fn row(&self, i: usize) -> Vec<f32> {
        let mut r = self.base.row(i);
        if let Some(d) = &self.delta {
            for (a, b) in r.iter_mut().zip(d.row(i)) {
                *a += b;
            }
        }
        r
    }

    /// `W_base + Δ` as one dense matrix.
    pub fn effective(&self) -> DenseMatrix {
        let mut w = self.base.to_dense();
        if let Some(d) = &self.delta {
            w.add_assign(&d.reconstruct()).expect("view shapes checked at construction");
        }
        w
    }
}

/// Base weights shared between views, keyed by checkpoint name.
#[derive(Debug, Clone)]
pub struct BaseModel {
    pub config: ToyArchConfig,
    pub tensors: BTreeMap<String, Arc<BaseWeight>>,
}

impl BaseModel {
    pub fn new(config: ToyArchConfig, tensors: BTreeMap<String, Arc<BaseWeight>>) -> Result<Self> {
        config.validate()?;
        for (name, shape) in config.tensor_shapes() {
            let t = tensors.get(&name).ok_or_else(|| Error::MissingTensor(name.clone()))?;
            if t.shape() != shape {
                return Err(Error::ShapeMismatch {
                    name,
                    expected: shape,
                    got: t.shape(),
                });
            }
        }
        Ok(Self { config, tensors })
    }

    pub fn from_checkpoint(ckpt: &ModelCheckpoint) -> Result<Self> {
        let config = *ckpt.config()?;
        let tensors = ckpt
            .tensors
            .iter()
            .map(|(k, v)| (k.clone(), Arc::new(BaseWeight::Dense(v.clone()))))
            .collect();
        Self::new(config, tensors)
    }

    fn weight(&self, name: &str) -> Result<&Arc<BaseWeight>> {
        self.tensors.get(name).ok_or_else(|| Error::MissingTensor(name.to_string()))
    }
}

#[derive(Debug, Clone)]
pub struct LayerView {
    pub norm1: Vec<f32>,
    pub norm2: Vec<f32>,
    /// Indexed like [`LINEAR_KINDS`].
    pub linears: [LinearView; 7],
}

pub(crate) const Q: usize = 0;
pub(crate) const K: usize = 1;
pub(crate) const V: usize = 2;
pub(crate) const O: usize = 3;
pub(crate) const GATE: usize = 4;
pub(crate) const UP: usize = 5;
pub(crate) const DOWN: usize = 6;

/// Where a checkpoint name lives inside a view.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LinearSlot {
    Layer(usize, usize),
    Head,
}

pub fn linear_slot(name: &str) -> Option<LinearSlot> {
    if name == "lm_head" {
        return Some(LinearSlot::Head);
    }
    let rest = name.strip_prefix("layers.")?;
    let (idx, kind) = rest.split_once('.')?;
    let layer = idx.parse().ok()?;
    let k = LINEAR_KINDS.iter().position(|&x| x == kind)?;
    Some(LinearSlot::Layer(layer, k))
}

#[derive(Debug, Clone)]
pub struct ModelView {
    pub config: ToyArchConfig,
    /// Rows are looked up, never multiplied.
    pub embed: LinearView,
    pub layers: Vec<LayerView>,
    pub final_norm: Vec<f32>,
    pub lm_head: LinearView,
    rope: Arc<RopeTable>,
}

impl ModelView {
    /// Plain checkpoint, every weight merged.
    pub fn merged(ckpt: &ModelCheckpoint) -> Result<Self> {
        Self::compose(&BaseModel::from_checkpoint(ckpt)?, BTreeMap::new())
    }

    /// Base weights with `delta` kept separate on projections.
    pub fn decomposed(base: &BaseModel, delta: &DeltaFile) -> Result<Self> {
        let deltas = delta
            .entries
            .iter()
            .map(|(k, e)| (k.clone(), DeltaRepr::from(e.clone())))
            .collect();
        Self::compose(base, deltas)
    }

    pub fn with_lowrank(base: &BaseModel, delta: &LowRankFile) -> Result<Self> {
        let deltas = delta
            .entries
            .iter()
            .map(|(k, e)| (k.clone(), DeltaRepr::from(e.clone())))
            .collect();
        Self::compose(base, deltas)
    }

    /// General constructor. Deltas on the embedding, projections and LM head
    /// stay decomposed; deltas on norm weights are merged.
    pub fn compose(base: &BaseModel, mut deltas: BTreeMap<String, DeltaRepr>) -> Result<Self> {
        let cfg = base.config;
        for (name, d) in &deltas {
            let b = base.tensors.get(name).ok_or_else(|| Error::UnexpectedTensor(name.clone()))?;
            if b.shape() != d.shape() {
                return Err(Error::ShapeMismatch {
                    name: name.clone(),
                    expected: b.shape(),
                    got: d.shape(),
                });
            }
        }
        let mut merged_vec = |name: &str| -> Result<DenseMatrix> {
            let mut w = base.weight(name)?.to_dense();
            if let Some(d) = deltas.remove(name) {
                w.add_assign(&d.reconstruct())?;
            }
            Ok(w)
        };
        let final_norm = merged_vec("final_norm")?.into_data();
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for i in 0..cfg.n_layers {
            let norm1 = merged_vec(&layer_name(i, "norm1"))?.into_data();
            let norm2 = merged_vec(&layer_name(i, "norm2"))?.into_data();
            layers.push((norm1, norm2));
        }
        let mut take_linear = |name: &str| -> Result<LinearView> {
            Ok(LinearView {
                base: Arc::clone(base.weight(name)?),
                delta: deltas.remove(name),
            })
        };
        let embed = take_linear("embed")?;
        let lm_head = take_linear("lm_head")?;
        let layers = layers
            .into_iter()
            .enumerate()
            .map(|(i, (norm1, norm2))| {
                let linears = [
                    take_linear(&layer_name(i, LINEAR_KINDS[0]))?,
                    take_linear(&layer_name(i, LINEAR_KINDS[1]))?,
                    take_linear(&layer_name(i, LINEAR_KINDS[2]))?,
                    take_linear(&layer_name(i, LINEAR_KINDS[3]))?,
                    take_linear(&layer_name(i, LINEAR_KINDS[4]))?,
                    take_linear(&layer_name(i, LINEAR_KINDS[5]))?,
                    take_linear(&layer_name(i, LINEAR_KINDS[6]))?,
                ];
                Ok(LayerView { norm1, norm2, linears })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ModelView {
            config: cfg,
            embed,
            layers,
            final_norm,
            lm_head,
            rope: Arc::new(RopeTable::new(cfg.max_seq, cfg.head_dim(), cfg.rope_theta)),
        })
    }

    pub fn rope(&self) -> &RopeTable {
        &self.rope
    }

    pub fn linear(&self, name: &str) -> Option<&LinearView> {
        match linear_slot(name)? {
            LinearSlot::Head => Some(&self.lm_head),
            LinearSlot::Layer(i, k) => self.layers.get(i).map(|l| &l.linears[k]),
        }
    }

    pub fn linear_mut(&mut self, name: &str) -> Option<&mut LinearView> {
        match linear_slot(name)? {
            LinearSlot::Head => Some(&mut self.lm_head),
            LinearSlot::Layer(i, k) => self.layers.get_mut(i).map(|l| &mut l.linears[k]),
        }
    }

    /// Names of every projection (and the LM head), in a fixed order.
    pub fn linear_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for i in 0..self.layers.len() {
            for kind in LINEAR_KINDS {
                out.push(layer_name(i, kind));
            }
        }
        out.push("lm_head".to_string());
        out
    }

    pub(crate) fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.len() > self.config.max_seq {
            return Err(Error::SequenceTooLong {
                len: tokens.len(),
                max: self.config.max_seq,
            });
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.config.vocab) {
            return Err(Error::TokenOutOfRange {
                token: t,
                vocab: self.config.vocab,
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slots() {
        assert_eq!(linear_slot("lm_head"), Some(LinearSlot::Head));
        assert_eq!(linear_slot("layers.3.mlp_up"), Some(LinearSlot::Layer(3, UP)));
        assert_eq!(linear_slot("layers.0.attn_q"), Some(LinearSlot::Layer(0, Q)));
        assert_eq!(linear_slot("layers.0.norm1"), None);
        assert_eq!(linear_slot("embed"), None);
        let _ = (K, V, O, GATE, DOWN);
    }
}
