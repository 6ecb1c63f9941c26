//! Fidelity of a compressed model against the fine-tuned teacher.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::Serialize;

use crate::checkpoint::ModelCheckpoint;
use crate::error::Result;
use crate::model::{forward, logit_mse, ModelView};
use crate::tensor::DenseMatrix;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    /// Mean over sequences of the per-sequence logit MSE.
    pub logit_mse: f64,
    /// `‖W_fine − W_student‖_F` per tensor.
    pub per_tensor_l2: BTreeMap<String, f64>,
    /// Fraction of positions where both models pick the same argmax token.
    pub greedy_agreement: f64,
    pub sequences: usize,
}

pub fn argmax(row: &[f32]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

/// Greedy next token after `prompt`.
pub fn greedy_next(view: &ModelView, prompt: &[u32]) -> Result<u32> {
    let logits = forward(view, prompt)?;
    Ok(argmax(logits.row(logits.rows() - 1)) as u32)
}

pub fn per_tensor_l2(fine: &ModelCheckpoint, student: &BTreeMap<String, DenseMatrix>) -> Result<BTreeMap<String, f64>> {
    fine.tensors
        .iter()
        .map(|(name, f)| {
            let s = student
                .get(name)
                .ok_or_else(|| crate::Error::MissingTensor(name.clone()))?;
            Ok((name.clone(), f.sub(s)?.frobenius_norm()))
        })
        .collect()
}

/// Runs both models over every sequence.
pub fn evaluate(
    student: &ModelView,
    teacher: &ModelView,
    student_weights: &BTreeMap<String, DenseMatrix>,
    fine: &ModelCheckpoint,
    sequences: &[Vec<u32>],
) -> Result<EvalReport> {
    let per_seq = sequences
        .par_iter()
        .map(|seq| {
            let s = forward(student, seq)?;
            let t = forward(teacher, seq)?;
            let agree = (0..s.rows()).filter(|&i| argmax(s.row(i)) == argmax(t.row(i))).count();
            Ok((logit_mse(&s, &t)?, agree, s.rows()))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = per_seq.len().max(1) as f64;
    let positions: usize = per_seq.iter().map(|p| p.2).sum();
    let agree: usize = per_seq.iter().map(|p| p.1).sum();
    Ok(EvalReport {
        logit_mse: per_seq.iter().map(|p| p.0).sum::<f64>() / n,
        per_tensor_l2: per_tensor_l2(fine, student_weights)?,
        greedy_agreement: if positions == 0 { 1.0 } else { agree as f64 / positions as f64 },
        sequences: sequences.len(),
    })
}
