//! Test-only oracles written independently of the library: a plain `f64`
//! transformer forward pass and a naive triple-loop matrix product.

#![allow(dead_code)]

use std::collections::BTreeMap;

use signdelta::config::{layer_name, ToyArchConfig};
use signdelta::model::ModelView;
use signdelta::{DenseMatrix, ModelCheckpoint};

/// Row-major `f64` copy of every tensor.
pub type Weights = BTreeMap<String, (usize, usize, Vec<f64>)>;

pub fn weights_of(ckpt: &ModelCheckpoint) -> Weights {
    ckpt.tensors
        .iter()
        .map(|(k, m)| (k.clone(), (m.rows(), m.cols(), m.data().iter().map(|&v| v as f64).collect())))
        .collect()
}

pub fn naive_matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[p * m + j];
            }
            out[i * m + j] = s;
        }
    }
    out
}

/// `x (t × in) · Wᵀ` with `W` stored `out × in`.
fn linear(x: &[f64], t: usize, w: &(usize, usize, Vec<f64>)) -> Vec<f64> {
    let (out, inp, data) = (w.0, w.1, &w.2);
    let mut y = vec![0.0; t * out];
    for r in 0..t {
        for o in 0..out {
            y[r * out + o] = (0..inp).map(|i| x[r * inp + i] * data[o * inp + i]).sum();
        }
    }
    y
}

fn rmsnorm(x: &[f64], d: usize, w: &[f64]) -> Vec<f64> {
    let mut y = x.to_vec();
    for row in y.chunks_mut(d) {
        let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let inv = 1.0 / (ms + 1e-6).sqrt();
        for (v, g) in row.iter_mut().zip(w) {
            *v *= inv * g;
        }
    }
    y
}

fn rope(x: &mut [f64], t: usize, dim: usize, hd: usize, theta: f64) {
    for pos in 0..t {
        for head in 0..dim / hd {
            for i in 0..hd / 2 {
                let angle = pos as f64 * theta.powf(-2.0 * i as f64 / hd as f64);
                let (c, s) = (angle.cos(), angle.sin());
                let base = pos * dim + head * hd + 2 * i;
                let (a, b) = (x[base], x[base + 1]);
                x[base] = a * c - b * s;
                x[base + 1] = a * s + b * c;
            }
        }
    }
}

/// Logits `t × vocab`, row-major.
pub fn reference_logits(cfg: &ToyArchConfig, w: &Weights, tokens: &[u32]) -> Vec<f64> {
    let (t, d) = (tokens.len(), cfg.dim);
    let hd = d / cfg.n_heads;
    let get = |name: &str| &w[name];
    let embed = get("embed");
    let mut x: Vec<f64> = tokens
        .iter()
        .flat_map(|&tok| embed.2[tok as usize * d..(tok as usize + 1) * d].to_vec())
        .collect();
    for l in 0..cfg.n_layers {
        let name = |k: &str| format!("layers.{l}.{k}");
        let h = rmsnorm(&x, d, &get(&name("norm1")).2);
        let mut q = linear(&h, t, get(&name("attn_q")));
        let mut k = linear(&h, t, get(&name("attn_k")));
        let v = linear(&h, t, get(&name("attn_v")));
        rope(&mut q, t, d, hd, cfg.rope_theta as f64);
        rope(&mut k, t, d, hd, cfg.rope_theta as f64);
        let mut attn = vec![0.0; t * d];
        for head in 0..cfg.n_heads {
            let off = head * hd;
            for i in 0..t {
                let scores: Vec<f64> = (0..=i)
                    .map(|j| (0..hd).map(|c| q[i * d + off + c] * k[j * d + off + c]).sum::<f64>() / (hd as f64).sqrt())
                    .collect();
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let z: f64 = e.iter().sum();
                for (j, ej) in e.iter().enumerate() {
                    for c in 0..hd {
                        attn[i * d + off + c] += ej / z * v[j * d + off + c];
                    }
                }
            }
        }
        let o = linear(&attn, t, get(&name("attn_o")));
        for (a, b) in x.iter_mut().zip(&o) {
            *a += b;
        }
        let h2 = rmsnorm(&x, d, &get(&name("norm2")).2);
        let g = linear(&h2, t, get(&name("mlp_gate")));
        let u = linear(&h2, t, get(&name("mlp_up")));
        let act: Vec<f64> = g.iter().zip(&u).map(|(&g, &u)| g / (1.0 + (-g).exp()) * u).collect();
        let down = linear(&act, t, get(&name("mlp_down")));
        for (a, b) in x.iter_mut().zip(&down) {
            *a += b;
        }
    }
    let hf = rmsnorm(&x, d, &get("final_norm").2);
    linear(&hf, t, get("lm_head"))
}

pub fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

pub fn to_f64(m: &DenseMatrix) -> Vec<f64> {
    m.data().iter().map(|&v| v as f64).collect()
}

/// Effective weights of a view in `f64`.
pub fn view_weights(view: &ModelView) -> Weights {
    let mut w = Weights::new();
    let mut put = |name: String, m: &DenseMatrix| {
        w.insert(name, (m.rows(), m.cols(), to_f64(m)));
    };
    put("embed".into(), &view.embed.effective());
    put("final_norm".into(), &DenseMatrix::row_vector(view.final_norm.clone()));
    for (i, l) in view.layers.iter().enumerate() {
        put(layer_name(i, "norm1"), &DenseMatrix::row_vector(l.norm1.clone()));
        put(layer_name(i, "norm2"), &DenseMatrix::row_vector(l.norm2.clone()));
    }
    for name in view.linear_names() {
        put(name.clone(), &view.linear(&name).unwrap().effective());
    }
    w
}

/// Central difference of the reference loss along `dir` added to `name`.
pub fn directional(view: &ModelView, tokens: &[u32], teacher: &[f64], name: &str, dir: &[f64]) -> f64 {
    let h = 1e-5;
    let w = view_weights(view);
    let eval = |sign: f64| {
        let mut w = w.clone();
        for (v, d) in w.get_mut(name).unwrap().2.iter_mut().zip(dir) {
            *v += sign * h * d;
        }
        mse(&reference_logits(&view.config, &w, tokens), teacher)
    };
    (eval(1.0) - eval(-1.0)) / (2.0 * h)
}
