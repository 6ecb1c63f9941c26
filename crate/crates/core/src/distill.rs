//! Scale distillation: with sign planes frozen, fit the per-plane scales (or
//! low-rank factors) so the compressed model's logits match the fine-tuned
//! model's on a calibration token stream.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::ModelCheckpoint;
use crate::delta_file::{DeltaEntry, DeltaFile};
use crate::error::{Error, Result};
use crate::lowrank::{LowRankEntry, LowRankFile};
use crate::model::{forward, logit_mse, loss_and_grads_with, BaseModel, DeltaRepr, EffectiveWeights, LinearView, ModelView, ParamGrad};
use crate::tensor::DenseMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub steps: usize,
    pub batch: usize,
    pub seq_len: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            batch: 4,
            seq_len: 128,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
        }
    }
}

impl DistillConfig {
    fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.seq_len == 0 {
            return Err(Error::Invalid("batch and seq_len must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Invalid(format!("learning rate {} is not usable", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Invalid("Adam needs β in [0, 1) and ε > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(name: &str, params: &mut [f64], grads: &[f64], state: &mut AdamState, cfg: &DistillConfig) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::DimensionMismatch {
            op: "adam_step",
            left: (params.len(), state.m.len()),
            right: (grads.len(), state.v.len()),
        });
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient of `{name}`")));
    }
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Token windows drawn from a calibration file.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Calibration {
    #[serde(skip)]
    pub sequences: Vec<Vec<u32>>,
    pub seq_len: usize,
    pub file_tokens: usize,
    /// Distinct non-overlapping windows the file holds.
    pub capacity: usize,
    /// Set when more windows were requested than the file holds and the
    /// seeded window order was repeated.
    pub wrapped: bool,
    pub seed: u64,
}

impl Calibration {
    pub fn from_sequences(sequences: Vec<Vec<u32>>) -> Self {
        let seq_len = sequences.first().map_or(0, Vec::len);
        let n = sequences.len();
        Calibration {
            file_tokens: n * seq_len,
            capacity: n,
            sequences,
            seq_len,
            wrapped: false,
            seed: 0,
        }
    }
}

pub fn read_token_file(path: &Path) -> Result<Vec<u32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Invalid(format!(
            "{}: token file length {} is not a multiple of 4",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes.chunks_exact(4).map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

pub fn write_token_file(path: &Path, tokens: &[u32]) -> Result<()> {
    let bytes: Vec<u8> = tokens.iter().flat_map(|t| t.to_le_bytes()).collect();
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Byte-level tokenizer: one id per byte, for a vocabulary of at least 256.
pub fn byte_tokenize(text: &[u8]) -> Vec<u32> {
    text.iter().map(|&b| b as u32).collect()
}

/// `count` windows of `seq_len` tokens at seeded, non-overlapping offsets.
pub fn calibration_windows(tokens: &[u32], seq_len: usize, count: usize, seed: u64, vocab: usize) -> Result<Calibration> {
    if seq_len == 0 || count == 0 {
        return Err(Error::EmptyCalibration);
    }
    if tokens.len() < seq_len {
        return Err(Error::ShortTokenFile {
            have: tokens.len(),
            need: seq_len,
        });
    }
    if let Some(&t) = tokens.iter().find(|&&t| t as usize >= vocab) {
        return Err(Error::TokenOutOfRange { token: t, vocab });
    }
    let capacity = tokens.len() / seq_len;
    let mut order: Vec<usize> = (0..capacity).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let sequences = (0..count)
        .map(|i| {
            let w = order[i % capacity];
            tokens[w * seq_len..(w + 1) * seq_len].to_vec()
        })
        .collect();
    Ok(Calibration {
        sequences,
        seq_len,
        file_tokens: tokens.len(),
        capacity,
        wrapped: count > capacity,
        seed,
    })
}

pub fn load_tokens(path: &Path, seq_len: usize, count: usize, seed: u64, vocab: usize) -> Result<Calibration> {
    calibration_windows(&read_token_file(path)?, seq_len, count, seed, vocab)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScaleDrift {
    pub name: String,
    pub plane: usize,
    pub alpha_before: f32,
    pub alpha_after: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FactorDrift {
    pub name: String,
    pub norm_before: f64,
    pub norm_after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistillReport {
    /// Mean logit MSE over the whole calibration set before training.
    pub initial_loss: f64,
    /// Same measure after training.
    pub final_loss: f64,
    pub steps: usize,
    pub config: DistillConfig,
    pub calibration: Calibration,
    /// Mean loss of each training batch, as seen by the optimizer.
    pub step_losses: Vec<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub per_tensor: Vec<ScaleDrift>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub factors: Vec<FactorDrift>,
}

/// Refines every plane's scale of every packed tensor in `delta`.
pub fn distill_scales(
    base: &ModelCheckpoint,
    fine: &ModelCheckpoint,
    delta: &DeltaFile,
    calib: &Calibration,
    cfg: &DistillConfig,
) -> Result<(DeltaFile, DistillReport)> {
    delta.check_against(base)?;
    base.check_compatible(fine)?;
    let bm = BaseModel::from_checkpoint(base)?;
    let view = ModelView::decomposed(&bm, delta)?;
    let names: Vec<String> = delta.quantized_names().into_iter().map(String::from).collect();
    let (view, mut report) = train(view, fine, &names, calib, cfg)?;

    let mut out = delta.clone();
    for name in &names {
        let Some(DeltaRepr::Stack(trained)) = &view.linear(name).expect("trained name").delta else {
            unreachable!("packed entries stay packed")
        };
        let Some(DeltaEntry::Packed(stack)) = out.entries.get_mut(name) else {
            unreachable!("quantized names are packed")
        };
        for (plane, (p, t)) in stack.planes_mut().iter_mut().zip(trained.planes()).enumerate() {
            report.per_tensor.push(ScaleDrift {
                name: name.clone(),
                plane,
                alpha_before: p.scale(),
                alpha_after: t.scale(),
            });
            p.set_scale(t.scale());
        }
    }
    Ok((out, report))
}

/// Trains every entry of every factor pair in `lr_delta`.
pub fn distill_lowrank(
    base: &ModelCheckpoint,
    fine: &ModelCheckpoint,
    lr_delta: &LowRankFile,
    calib: &Calibration,
    cfg: &DistillConfig,
) -> Result<(LowRankFile, DistillReport)> {
    base.check_compatible(fine)?;
    let bm = BaseModel::from_checkpoint(base)?;
    let view = ModelView::with_lowrank(&bm, lr_delta)?;
    let names: Vec<String> = lr_delta
        .entries
        .iter()
        .filter(|(_, e)| matches!(e, LowRankEntry::LowRank(_)))
        .map(|(k, _)| k.clone())
        .collect();
    let (view, mut report) = train(view, fine, &names, calib, cfg)?;

    let mut out = lr_delta.clone();
    for name in &names {
        let Some(DeltaRepr::LowRank(trained)) = &view.linear(name).expect("trained name").delta else {
            unreachable!("low-rank entries stay low-rank")
        };
        let entry = out.entries.get_mut(name).expect("trained name");
        report.factors.push(FactorDrift {
            name: name.clone(),
            norm_before: entry.reconstruct().frobenius_norm(),
            norm_after: trained.reconstruct().frobenius_norm(),
        });
        *entry = LowRankEntry::LowRank(trained.clone());
    }
    Ok((out, report))
}

fn read_params(lin: &LinearView, name: &str) -> Result<Vec<f64>> {
    match &lin.delta {
        Some(DeltaRepr::Stack(s)) => Ok(s.planes().iter().map(|p| p.scale() as f64).collect()),
        Some(DeltaRepr::LowRank(l)) => Ok(l.a.data().iter().chain(l.b.data()).map(|&v| v as f64).collect()),
        _ => Err(Error::Invalid(format!("`{name}` has no trainable delta"))),
    }
}

fn write_params(lin: &mut LinearView, params: &[f64]) {
    match &mut lin.delta {
        Some(DeltaRepr::Stack(s)) => {
            for (p, &v) in s.planes_mut().iter_mut().zip(params) {
                p.set_scale(v as f32);
            }
        }
        Some(DeltaRepr::LowRank(l)) => {
            let na = l.a.len();
            for (d, &v) in l.a.data_mut().iter_mut().zip(&params[..na]) {
                *d = v as f32;
            }
            for (d, &v) in l.b.data_mut().iter_mut().zip(&params[na..]) {
                *d = v as f32;
            }
        }
        _ => unreachable!("checked by read_params"),
    }
}

fn flat_grad(g: &ParamGrad) -> Vec<f64> {
    match g {
        ParamGrad::Scales(s) => s.clone(),
        ParamGrad::LowRank { a, b } => a.data().iter().chain(b.data()).map(|&v| v as f64).collect(),
        ParamGrad::Weight(w) => w.data().iter().map(|&v| v as f64).collect(),
    }
}

fn mean_loss(view: &ModelView, seqs: &[Vec<u32>], teacher: &[DenseMatrix]) -> Result<f64> {
    let losses = seqs
        .par_iter()
        .zip(teacher)
        .map(|(s, t)| logit_mse(&forward(view, s)?, t))
        .collect::<Result<Vec<f64>>>()?;
    let mean = losses.iter().sum::<f64>() / losses.len() as f64;
    if !mean.is_finite() {
        return Err(Error::NonFinite("calibration loss".into()));
    }
    Ok(mean)
}

/// Seeded sample order; reshuffles on every pass through the set.
struct BatchOrder {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
}

impl BatchOrder {
    fn new(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Self { rng, order, pos: 0 }
    }

    fn next(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

fn train(
    mut view: ModelView,
    fine: &ModelCheckpoint,
    names: &[String],
    calib: &Calibration,
    cfg: &DistillConfig,
) -> Result<(ModelView, DistillReport)> {
    cfg.validate()?;
    let seqs = &calib.sequences;
    if seqs.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    let teacher_view = ModelView::merged(fine)?;
    let teacher = seqs
        .par_iter()
        .map(|s| forward(&teacher_view, s))
        .collect::<Result<Vec<_>>>()?;
    drop(teacher_view);

    let initial_loss = mean_loss(&view, seqs, &teacher)?;
    let trainable: BTreeSet<String> = names.iter().cloned().collect();
    let mut params = names
        .iter()
        .map(|n| read_params(view.linear(n).ok_or_else(|| Error::UnexpectedTensor(n.clone()))?, n))
        .collect::<Result<Vec<_>>>()?;
    let mut states: Vec<AdamState> = params.iter().map(|p| AdamState::new(p.len())).collect();
    let mut order = BatchOrder::new(seqs.len(), cfg.seed);
    let mut step_losses = Vec::with_capacity(cfg.steps);

    for _ in 0..cfg.steps {
        let batch: Vec<usize> = (0..cfg.batch).map(|_| order.next()).collect();
        let eff = EffectiveWeights::of(&view);
        let results = batch
            .par_iter()
            .map(|&i| loss_and_grads_with(&view, &eff, &seqs[i], &teacher[i], &trainable))
            .collect::<Result<Vec<_>>>()?;
        let inv = 1.0 / batch.len() as f64;
        let loss = results.iter().map(|(l, _)| l).sum::<f64>() * inv;
        if !loss.is_finite() {
            return Err(Error::NonFinite("training loss".into()));
        }
        step_losses.push(loss);
        for (k, name) in names.iter().enumerate() {
            let mut g = vec![0.0; params[k].len()];
            for (_, grads) in &results {
                for (a, b) in g.iter_mut().zip(flat_grad(&grads[name])) {
                    *a += b * inv;
                }
            }
            adam_step(name, &mut params[k], &g, &mut states[k], cfg)?;
            write_params(view.linear_mut(name).expect("trainable name"), &params[k]);
        }
    }

    let final_loss = mean_loss(&view, seqs, &teacher)?;
    let report = DistillReport {
        initial_loss,
        final_loss,
        steps: cfg.steps,
        config: *cfg,
        calibration: calib.clone(),
        step_losses,
        per_tensor: Vec::new(),
        factors: Vec::new(),
    };
    Ok((view, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_adam_step_is_lr() {
        let cfg = DistillConfig::default();
        let mut p = [0.5];
        let mut s = AdamState::new(1);
        adam_step("p", &mut p, &[1.0], &mut s, &cfg).unwrap();
        assert!((p[0] - (0.5 - 1e-4 / (1.0 + 1e-8))).abs() < 1e-15);
        let mut q = [0.5];
        adam_step("q", &mut q, &[0.0], &mut AdamState::new(1), &cfg).unwrap();
        assert_eq!(q[0], 0.5);
    }

    #[test]
    fn constant_gradient_does_not_blow_up() {
        let cfg = DistillConfig::default();
        let mut p = [0.0];
        let mut s = AdamState::new(1);
        adam_step("p", &mut p, &[3.0], &mut s, &cfg).unwrap();
        let u1 = p[0].abs();
        let before = p[0];
        adam_step("p", &mut p, &[3.0], &mut s, &cfg).unwrap();
        assert!((p[0] - before).abs() <= u1 * (1.0 + 1e-6));
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let err = adam_step("layers.0.attn_q", &mut [0.0], &[f64::NAN], &mut AdamState::new(1), &DistillConfig::default())
            .unwrap_err();
        assert!(err.to_string().contains("layers.0.attn_q"), "{err}");
    }

    #[test]
    fn windows_do_not_overlap() {
        let tokens: Vec<u32> = (0..1024).collect();
        let c = calibration_windows(&tokens, 128, 8, 5, 2048).unwrap();
        assert_eq!(c.sequences.len(), 8);
        assert!(!c.wrapped);
        let mut starts: Vec<u32> = c.sequences.iter().map(|s| s[0]).collect();
        starts.sort();
        assert_eq!(starts, (0..8).map(|i| i * 128).collect::<Vec<_>>());
        assert_eq!(c, calibration_windows(&tokens, 128, 8, 5, 2048).unwrap());
        let w = calibration_windows(&tokens, 128, 20, 5, 2048).unwrap();
        assert!(w.wrapped);
        assert_eq!(w.sequences.len(), 20);
        assert_eq!(w.sequences[8], w.sequences[0]);
    }

    #[test]
    fn token_file_errors() {
        let tokens: Vec<u32> = (0..100).collect();
        assert!(matches!(
            calibration_windows(&tokens, 128, 1, 0, 256),
            Err(Error::ShortTokenFile { have: 100, need: 128 })
        ));
        assert!(matches!(
            calibration_windows(&tokens, 10, 1, 0, 50),
            Err(Error::TokenOutOfRange { token: 50, vocab: 50 })
        ));
    }
}
