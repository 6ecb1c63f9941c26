use std::collections::{BTreeMap, BTreeSet};

use super::forward::{forward_with_tape, logit_mse, EffectiveWeights};
use super::ops::{rmsnorm_backward, silu, silu_grad};
use super::{linear_slot, DeltaRepr, LinearSlot, ModelView, DOWN, GATE, K, O, Q, UP, V};
use crate::error::{Error, Result};
use crate::tensor::DenseMatrix;

/// Gradient with respect to the trainable part of one projection.
#[derive(Debug, Clone, PartialEq)]
pub enum ParamGrad {
    /// One entry per sign plane.
    Scales(Vec<f64>),
    LowRank { a: DenseMatrix, b: DenseMatrix },
    /// Full dense weight (for projections without a structured delta).
    Weight(DenseMatrix),
}

impl ParamGrad {
    pub fn is_finite(&self) -> bool {
        match self {
            ParamGrad::Scales(s) => s.iter().all(|v| v.is_finite()),
            ParamGrad::LowRank { a, b } => a.is_finite() && b.is_finite(),
            ParamGrad::Weight(w) => w.is_finite(),
        }
    }

    /// Elementwise `self += other`; both sides must have the same layout.
    pub fn accumulate(&mut self, other: &ParamGrad) {
        match (self, other) {
            (ParamGrad::Scales(a), ParamGrad::Scales(b)) => {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += y;
                }
            }
            (ParamGrad::LowRank { a, b }, ParamGrad::LowRank { a: da, b: db }) => {
                a.add_assign(da).expect("matching gradient layout");
                b.add_assign(db).expect("matching gradient layout");
            }
            (ParamGrad::Weight(a), ParamGrad::Weight(b)) => {
                a.add_assign(b).expect("matching gradient layout");
            }
            _ => panic!("mismatched gradient kinds"),
        }
    }
}

/// Loss `mean((student − teacher)²)` on one sequence and its gradient with
/// respect to the named projections.
pub fn loss_and_grads(
    view: &ModelView,
    tokens: &[u32],
    teacher: &DenseMatrix,
    trainable: &BTreeSet<String>,
) -> Result<(f64, BTreeMap<String, ParamGrad>)> {
    loss_and_grads_with(view, &EffectiveWeights::of(view), tokens, teacher, trainable)
}

/// As [`loss_and_grads`] with precomputed effective weights.
pub fn loss_and_grads_with(
    view: &ModelView,
    eff: &EffectiveWeights,
    tokens: &[u32],
    teacher: &DenseMatrix,
    trainable: &BTreeSet<String>,
) -> Result<(f64, BTreeMap<String, ParamGrad>)> {
    let mut wanted = BTreeMap::new();
    for name in trainable {
        let slot = linear_slot(name).ok_or_else(|| Error::UnexpectedTensor(name.clone()))?;
        if let LinearSlot::Layer(i, _) = slot {
            if i >= view.layers.len() {
                return Err(Error::UnexpectedTensor(name.clone()));
            }
        }
        wanted.insert(slot, name.clone());
    }
    let (logits, tape) = forward_with_tape(view, eff, tokens)?;
    let loss = logit_mse(&logits, teacher)?;
    let norm = 2.0 / logits.len() as f32;
    let mut dz = logits;
    for (z, &t) in dz.data_mut().iter_mut().zip(teacher.data()) {
        *z = (*z - t) * norm;
    }

    let mut weight_grads: BTreeMap<LinearSlot, DenseMatrix> = BTreeMap::new();
    let mut record = |slot: LinearSlot, dy: &DenseMatrix, x: &DenseMatrix| {
        if wanted.contains_key(&slot) {
            weight_grads.insert(slot, dy.t_matmul(x).expect("activation shapes"));
        }
    };

    let cfg = view.config;
    let (n_t, hd) = (tokens.len(), cfg.head_dim());
    let scale = 1.0 / (hd as f32).sqrt();

    record(LinearSlot::Head, &dz, &tape.hf);
    let dhf = dz.matmul(&eff.lm_head)?;
    let mut dx = rmsnorm_backward(&tape.x_out, &view.final_norm, &tape.inv_f, &dhf);

    for (li, lt) in tape.layers.iter().enumerate().rev() {
        let w = &eff.layers[li];
        let layer = &view.layers[li];
        let slot = |k| LinearSlot::Layer(li, k);

        // MLP
        record(slot(DOWN), &dx, &lt.act);
        let dact = dx.matmul(&w[DOWN])?;
        let mut dgate = DenseMatrix::zeros(n_t, cfg.intermediate);
        let mut dup = DenseMatrix::zeros(n_t, cfg.intermediate);
        for (idx, &da) in dact.data().iter().enumerate() {
            let (g, u) = (lt.gate.data()[idx], lt.up.data()[idx]);
            dgate.data_mut()[idx] = da * u * silu_grad(g);
            dup.data_mut()[idx] = da * silu(g);
        }
        record(slot(GATE), &dgate, &lt.h2);
        record(slot(UP), &dup, &lt.h2);
        let mut dh2 = dgate.matmul(&w[GATE])?;
        dh2.add_assign(&dup.matmul(&w[UP])?)?;
        let mut dx_mid = rmsnorm_backward(&lt.x_mid, &layer.norm2, &lt.inv2, &dh2);
        dx_mid.add_assign(&dx)?;

        // attention
        record(slot(O), &dx_mid, &lt.attn);
        let dattn = dx_mid.matmul(&w[O])?;
        let mut dq = DenseMatrix::zeros(n_t, cfg.dim);
        let mut dk = DenseMatrix::zeros(n_t, cfg.dim);
        let mut dv = DenseMatrix::zeros(n_t, cfg.dim);
        for h in 0..cfg.n_heads {
            let cols = h * hd..(h + 1) * hd;
            let p = &lt.probs[h];
            for i in 0..n_t {
                let dout = &dattn.row(i)[cols.clone()];
                // dP_ij = dout_i · v_j, then softmax backward on row i
                let mut dp: Vec<f32> = (0..=i)
                    .map(|j| crate::tensor::dot(dout, &lt.v.row(j)[cols.clone()]))
                    .collect();
                let row_dot: f32 = dp.iter().enumerate().map(|(j, &g)| g * p.get(i, j)).sum();
                for (j, g) in dp.iter_mut().enumerate() {
                    *g = p.get(i, j) * (*g - row_dot) * scale;
                }
                for j in 0..=i {
                    let pij = p.get(i, j);
                    let ds = dp[j];
                    let (qi, kj) = (&lt.q.row(i)[cols.clone()], &lt.k.row(j)[cols.clone()]);
                    let dqi = &mut dq.row_mut(i)[cols.clone()];
                    for (o, &kv) in dqi.iter_mut().zip(kj) {
                        *o += ds * kv;
                    }
                    let dkj = &mut dk.row_mut(j)[cols.clone()];
                    for (o, &qv) in dkj.iter_mut().zip(qi) {
                        *o += ds * qv;
                    }
                    let dvj = &mut dv.row_mut(j)[cols.clone()];
                    for (o, &g) in dvj.iter_mut().zip(dout) {
                        *o += pij * g;
                    }
                }
            }
        }
        for t in 0..n_t {
            view.rope().apply(dq.row_mut(t), t, true);
            view.rope().apply(dk.row_mut(t), t, true);
        }
        record(slot(Q), &dq, &lt.h1);
        record(slot(K), &dk, &lt.h1);
        record(slot(V), &dv, &lt.h1);
        let mut dh1 = dq.matmul(&w[Q])?;
        dh1.add_assign(&dk.matmul(&w[K])?)?;
        dh1.add_assign(&dv.matmul(&w[V])?)?;
        let mut dx_in = rmsnorm_backward(&lt.x_in, &layer.norm1, &lt.inv1, &dh1);
        dx_in.add_assign(&dx_mid)?;
        dx = dx_in;
    }

    let mut grads = BTreeMap::new();
    for (slot, name) in wanted {
        let dw = weight_grads.remove(&slot).expect("gradient recorded for every wanted slot");
        let lin = match slot {
            LinearSlot::Head => &view.lm_head,
            LinearSlot::Layer(i, k) => &view.layers[i].linears[k],
        };
        let g = match &lin.delta {
            Some(DeltaRepr::Stack(s)) => ParamGrad::Scales(s.planes().iter().map(|p| p.signed_sum(&dw)).collect()),
            Some(DeltaRepr::LowRank(l)) => ParamGrad::LowRank {
                a: dw.matmul_t(&l.b)?,
                b: l.a.t_matmul(&dw)?,
            },
            _ => ParamGrad::Weight(dw),
        };
        grads.insert(name, g);
    }
    Ok((loss, grads))
}
