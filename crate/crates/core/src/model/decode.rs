use std::sync::Arc;

use super::ops::{rmsnorm_row, silu, softmax_in_place};
use super::{LinearView, ModelView, DOWN, GATE, K, O, Q, UP, V};
use crate::error::{Error, Result};
use crate::tensor::{dot, DenseMatrix};

/// Rotated keys and values of every past position, per layer.
#[derive(Debug, Clone, Default)]
pub struct KvCache {
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    len: usize,
}

impl KvCache {
    pub fn new(n_layers: usize) -> Self {
        Self {
            keys: vec![Vec::new(); n_layers],
            values: vec![Vec::new(); n_layers],
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Drops every position at or after `len`.
    pub fn truncate(&mut self, len: usize) {
        if len >= self.len {
            return;
        }
        let per = |v: &Vec<f32>| v.len().checked_div(self.len).unwrap_or(0);
        for i in 0..self.keys.len() {
            let w = per(&self.keys[i]);
            self.keys[i].truncate(len * w);
            self.values[i].truncate(len * w);
        }
        self.len = len;
    }

    pub fn bytes(&self) -> usize {
        self.keys.iter().chain(&self.values).map(|v| v.len() * 4).sum()
    }
}

impl ModelView {
    pub fn new_cache(&self) -> KvCache {
        KvCache::new(self.layers.len())
    }

    /// Logits for `token` at the next position of `cache`.
    pub fn decode_step(&self, cache: &mut KvCache, token: u32) -> Result<Vec<f32>> {
        let mut out = decode_batch(&[self], &mut [cache], &[token])?;
        Ok(out.pop().expect("one row"))
    }
}

/// One decode step for several requests whose views share base weights.
///
/// Every projection runs as a single base GEMM over the stacked activation
/// rows, after which each row receives its own request's delta. Requests
/// whose views do not share a base weight are an error.
pub fn decode_batch(views: &[&ModelView], caches: &mut [&mut KvCache], tokens: &[u32]) -> Result<Vec<Vec<f32>>> {
    let n = views.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    if caches.len() != n || tokens.len() != n {
        return Err(Error::Invalid(format!(
            "batch of {n} views with {} caches and {} tokens",
            caches.len(),
            tokens.len()
        )));
    }
    let lead = views[0];
    let cfg = lead.config;
    for (v, (c, &t)) in views.iter().zip(caches.iter().zip(tokens)) {
        if v.config != cfg {
            return Err(Error::Invalid("batched views disagree on architecture".into()));
        }
        v.check_tokens(&[t])?;
        if c.len >= cfg.max_seq {
            return Err(Error::SequenceTooLong {
                len: c.len + 1,
                max: cfg.max_seq,
            });
        }
        if c.keys.len() != v.layers.len() {
            return Err(Error::Invalid("cache built for another model".into()));
        }
    }
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f32).sqrt();

    let mut x = DenseMatrix::zeros(n, cfg.dim);
    for r in 0..n {
        x.row_mut(r).copy_from_slice(&views[r].embed.row(tokens[r] as usize));
    }
    for li in 0..cfg.n_layers {
        let lin = |k: usize| -> Vec<&LinearView> { views.iter().map(|v| &v.layers[li].linears[k]).collect() };
        let mut h1 = x.clone();
        for r in 0..n {
            rmsnorm_row(h1.row_mut(r), &views[r].layers[li].norm1);
        }
        let mut q = project(&lin(Q), &h1)?;
        let mut k = project(&lin(K), &h1)?;
        let v = project(&lin(V), &h1)?;
        let mut attn = DenseMatrix::zeros(n, cfg.dim);
        for r in 0..n {
            let pos = caches[r].len;
            views[r].rope().apply(q.row_mut(r), pos, false);
            views[r].rope().apply(k.row_mut(r), pos, false);
            let cache = &mut *caches[r];
            cache.keys[li].extend_from_slice(k.row(r));
            cache.values[li].extend_from_slice(v.row(r));
            let (keys, vals) = (&cache.keys[li], &cache.values[li]);
            let ctx = pos + 1;
            for h in 0..cfg.n_heads {
                let cols = h * hd..(h + 1) * hd;
                let qh = &q.row(r)[cols.clone()];
                let mut s: Vec<f32> = (0..ctx)
                    .map(|j| dot(qh, &keys[j * cfg.dim..][cols.clone()]) * scale)
                    .collect();
                softmax_in_place(&mut s);
                let out = &mut attn.row_mut(r)[cols.clone()];
                for (j, &p) in s.iter().enumerate() {
                    for (o, &vv) in out.iter_mut().zip(&vals[j * cfg.dim..][cols.clone()]) {
                        *o += p * vv;
                    }
                }
            }
        }
        x.add_assign(&project(&lin(O), &attn)?)?;
        let mut h2 = x.clone();
        for r in 0..n {
            rmsnorm_row(h2.row_mut(r), &views[r].layers[li].norm2);
        }
        let mut act = project(&lin(GATE), &h2)?;
        let up = project(&lin(UP), &h2)?;
        for (a, &u) in act.data_mut().iter_mut().zip(up.data()) {
            *a = silu(*a) * u;
        }
        x.add_assign(&project(&lin(DOWN), &act)?)?;
    }
    for r in 0..n {
        rmsnorm_row(x.row_mut(r), &views[r].final_norm);
    }
    let heads: Vec<&LinearView> = views.iter().map(|v| &v.lm_head).collect();
    let logits = project(&heads, &x)?;
    for c in caches.iter_mut() {
        c.len += 1;
    }
    Ok((0..n).map(|r| logits.row(r).to_vec()).collect())
}

/// Shared base GEMM, then row `r` gets `linears[r]`'s delta.
fn project(linears: &[&LinearView], x: &DenseMatrix) -> Result<DenseMatrix> {
    let base = &linears[0].base;
    if linears.iter().any(|l| !Arc::ptr_eq(&l.base, base)) {
        return Err(Error::Invalid("batched views do not share base weights".into()));
    }
    let mut y = base.matmul_t(x)?;
    for (r, l) in linears.iter().enumerate() {
        if let Some(d) = &l.delta {
            d.accumulate_row(x.row(r), y.row_mut(r));
        }
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ToyArchConfig;
    use crate::model::forward;
    use crate::synth::{random_checkpoint, random_tokens};

    #[test]
    fn incremental_matches_full_sequence() {
        let cfg = ToyArchConfig {
            vocab: 32,
            dim: 16,
            n_layers: 2,
            n_heads: 2,
            intermediate: 24,
            max_seq: 12,
            rope_theta: 10000.0,
        };
        let ckpt = random_checkpoint(&cfg, 1).unwrap();
        let view = ModelView::merged(&ckpt).unwrap();
        let tokens = random_tokens(32, 10, 2);
        let full = forward(&view, &tokens).unwrap();
        let mut cache = view.new_cache();
        for (t, &tok) in tokens.iter().enumerate() {
            let row = view.decode_step(&mut cache, tok).unwrap();
            let err = crate::tensor::relative_error(&row, full.row(t));
            assert!(err < 1e-5, "position {t}: {err}");
        }
        assert_eq!(cache.len(), 10);
        cache.truncate(4);
        assert_eq!(cache.len(), 4);
        let again = view.decode_step(&mut cache, tokens[4]).unwrap();
        assert!(crate::tensor::relative_error(&again, full.row(4)) < 1e-5);
    }
}
