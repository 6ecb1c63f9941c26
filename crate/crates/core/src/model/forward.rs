use super::ops::{rmsnorm, silu, softmax_in_place};
use super::{LinearSlot, ModelView, DOWN, GATE, K, O, Q, UP, V};
use crate::error::{Error, Result};
use crate::tensor::DenseMatrix;

/// Dense `W_base + Δ` for every projection of a view. Training runs on
/// these so gradients reach all delta parameters through one matrix.
#[derive(Debug, Clone)]
pub struct EffectiveWeights {
    pub layers: Vec<[DenseMatrix; 7]>,
    pub lm_head: DenseMatrix,
}

impl EffectiveWeights {
    pub fn of(view: &ModelView) -> Self {
        let layers = view
            .layers
            .iter()
            .map(|l| std::array::from_fn(|k| l.linears[k].effective()))
            .collect();
        Self {
            layers,
            lm_head: view.lm_head.effective(),
        }
    }

    pub fn get(&self, slot: LinearSlot) -> &DenseMatrix {
        match slot {
            LinearSlot::Head => &self.lm_head,
            LinearSlot::Layer(i, k) => &self.layers[i][k],
        }
    }
}

/// Saved activations of one layer.
#[derive(Debug, Clone)]
pub(crate) struct LayerTape {
    pub x_in: DenseMatrix,
    pub inv1: Vec<f32>,
    pub h1: DenseMatrix,
    pub q: DenseMatrix,
    pub k: DenseMatrix,
    pub v: DenseMatrix,
    /// Per head, `T × T` attention probabilities.
    pub probs: Vec<DenseMatrix>,
    pub attn: DenseMatrix,
    pub x_mid: DenseMatrix,
    pub inv2: Vec<f32>,
    pub h2: DenseMatrix,
    pub gate: DenseMatrix,
    pub up: DenseMatrix,
    pub act: DenseMatrix,
}

#[derive(Debug, Clone)]
pub struct ForwardTape {
    pub(crate) layers: Vec<LayerTape>,
    pub(crate) x_out: DenseMatrix,
    pub(crate) inv_f: Vec<f32>,
    pub(crate) hf: DenseMatrix,
}

/// Logits `T × vocab` for one token sequence, projections evaluated as base
/// GEMM plus delta.
pub fn forward(view: &ModelView, tokens: &[u32]) -> Result<DenseMatrix> {
    let (logits, _) = run(view, &|slot, x| view_linear(view, slot).forward(x), tokens, false)?;
    Ok(logits)
}

/// Forward on merged effective weights, keeping what the backward pass needs.
pub fn forward_with_tape(
    view: &ModelView,
    eff: &EffectiveWeights,
    tokens: &[u32],
) -> Result<(DenseMatrix, ForwardTape)> {
    let (logits, tape) = run(
        view,
        &|slot, x| x.matmul_t(eff.get(slot)).expect("effective weight shapes"),
        tokens,
        true,
    )?;
    Ok((logits, tape.expect("tape requested")))
}

/// Mean squared error over every position and vocabulary entry.
pub fn logit_mse(student: &DenseMatrix, teacher: &DenseMatrix) -> Result<f64> {
    if student.shape() != teacher.shape() {
        return Err(Error::DimensionMismatch {
            op: "logit_mse",
            left: student.shape(),
            right: teacher.shape(),
        });
    }
    let sum: f64 = student
        .data()
        .iter()
        .zip(teacher.data())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum();
    Ok(sum / student.len().max(1) as f64)
}

fn view_linear(view: &ModelView, slot: LinearSlot) -> &super::LinearView {
    match slot {
        LinearSlot::Head => &view.lm_head,
        LinearSlot::Layer(i, k) => &view.layers[i].linears[k],
    }
}

pub(crate) fn embed_tokens(view: &ModelView, tokens: &[u32]) -> DenseMatrix {
    let d = view.config.dim;
    let mut x = DenseMatrix::zeros(tokens.len(), d);
    for (t, &tok) in tokens.iter().enumerate() {
        x.row_mut(t).copy_from_slice(&view.embed.row(tok as usize));
    }
    x
}

type Project<'a> = dyn Fn(LinearSlot, &DenseMatrix) -> DenseMatrix + 'a;

fn run(
    view: &ModelView,
    project: &Project<'_>,
    tokens: &[u32],
    keep: bool,
) -> Result<(DenseMatrix, Option<ForwardTape>)> {
    view.check_tokens(tokens)?;
    let cfg = view.config;
    let (n_t, hd) = (tokens.len(), cfg.head_dim());
    let scale = 1.0 / (hd as f32).sqrt();
    let mut x = embed_tokens(view, tokens);
    let mut tapes = Vec::new();
    for (li, layer) in view.layers.iter().enumerate() {
        let slot = |k| LinearSlot::Layer(li, k);
        let (h1, inv1) = rmsnorm(&x, &layer.norm1);
        let mut q = project(slot(Q), &h1);
        let mut k = project(slot(K), &h1);
        let v = project(slot(V), &h1);
        for t in 0..n_t {
            view.rope().apply(q.row_mut(t), t, false);
            view.rope().apply(k.row_mut(t), t, false);
        }
        let mut attn = DenseMatrix::zeros(n_t, cfg.dim);
        let mut probs = Vec::with_capacity(if keep { cfg.n_heads } else { 0 });
        for h in 0..cfg.n_heads {
            let cols = h * hd..(h + 1) * hd;
            let mut p = DenseMatrix::zeros(n_t, n_t);
            for i in 0..n_t {
                let qi = &q.row(i)[cols.clone()];
                let row = &mut p.row_mut(i)[..=i];
                for (j, s) in row.iter_mut().enumerate() {
                    *s = crate::tensor::dot(qi, &k.row(j)[cols.clone()]) * scale;
                }
                softmax_in_place(row);
                let out = &mut attn.row_mut(i)[cols.clone()];
                for j in 0..=i {
                    let pij = p.get(i, j);
                    for (o, &vv) in out.iter_mut().zip(&v.row(j)[cols.clone()]) {
                        *o += pij * vv;
                    }
                }
            }
            if keep {
                probs.push(p);
            }
        }
        let mut x_mid = project(slot(O), &attn);
        x_mid.add_assign(&x)?;
        let (h2, inv2) = rmsnorm(&x_mid, &layer.norm2);
        let gate = project(slot(GATE), &h2);
        let up = project(slot(UP), &h2);
        let mut act = gate.clone();
        for (a, &u) in act.data_mut().iter_mut().zip(up.data()) {
            *a = silu(*a) * u;
        }
        let mut x_out = project(slot(DOWN), &act);
        x_out.add_assign(&x_mid)?;
        if keep {
            tapes.push(LayerTape {
                x_in: x,
                inv1,
                h1,
                q,
                k,
                v,
                probs,
                attn,
                x_mid,
                inv2,
                h2,
                gate,
                up,
                act,
            });
        }
        x = x_out;
    }
    let (hf, inv_f) = rmsnorm(&x, &view.final_norm);
    let logits = project(LinearSlot::Head, &hf);
    let tape = keep.then_some(ForwardTape {
        layers: tapes,
        x_out: x,
        inv_f,
        hf,
    });
    Ok((logits, tape))
}
