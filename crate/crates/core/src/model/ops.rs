//! Elementwise and per-row building blocks shared by the full-sequence
//! forward pass, the backward pass and incremental decoding.

use crate::tensor::DenseMatrix;

pub const RMS_EPS: f32 = 1e-6;

/// `y = x / rms(x) * w` per row. Returns `y` and the per-row `1/rms`.
pub fn rmsnorm(x: &DenseMatrix, w: &[f32]) -> (DenseMatrix, Vec<f32>) {
    let mut y = x.clone();
    let mut inv = Vec::with_capacity(x.rows());
    for t in 0..x.rows() {
        inv.push(rmsnorm_row(y.row_mut(t), w));
    }
    (y, inv)
}

/// In-place row version; returns `1/rms`.
pub fn rmsnorm_row(x: &mut [f32], w: &[f32]) -> f32 {
    debug_assert_eq!(x.len(), w.len());
    let ms = x.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / x.len() as f64;
    let inv = (1.0 / (ms + RMS_EPS as f64).sqrt()) as f32;
    for (v, &g) in x.iter_mut().zip(w) {
        *v = *v * inv * g;
    }
    inv
}

/// Gradient through `rmsnorm` given the saved input and `1/rms`.
pub fn rmsnorm_backward(x: &DenseMatrix, w: &[f32], inv: &[f32], dy: &DenseMatrix) -> DenseMatrix {
    let d = x.cols() as f32;
    let mut dx = DenseMatrix::zeros(x.rows(), x.cols());
    for t in 0..x.rows() {
        let (xr, dyr, r) = (x.row(t), dy.row(t), inv[t]);
        let dot: f32 = xr.iter().zip(dyr).zip(w).map(|((&xv, &g), &wv)| g * wv * xv).sum();
        let k = r * r * r / d * dot;
        for (j, o) in dx.row_mut(t).iter_mut().enumerate() {
            *o = r * dyr[j] * w[j] - xr[j] * k;
        }
    }
    dx
}

#[inline]
pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn silu(x: f32) -> f32 {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad(x: f32) -> f32 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

pub fn softmax_in_place(xs: &mut [f32]) {
    let max = xs.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
    let mut sum = 0.0f32;
    for v in xs.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in xs.iter_mut() {
        *v /= sum;
    }
}

/// Rotary position embedding tables: `cos`/`sin` of `pos · θ^(-2i/head_dim)`.
#[derive(Debug, Clone)]
pub struct RopeTable {
    half: usize,
    cos: Vec<f32>,
    sin: Vec<f32>,
}

impl RopeTable {
    pub fn new(max_seq: usize, head_dim: usize, theta: f32) -> Self {
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(max_seq * half);
        let mut sin = Vec::with_capacity(max_seq * half);
        for pos in 0..max_seq {
            for i in 0..half {
                let freq = (theta as f64).powf(-2.0 * i as f64 / head_dim as f64);
                let angle = pos as f64 * freq;
                cos.push(angle.cos() as f32);
                sin.push(angle.sin() as f32);
            }
        }
        Self { half, cos, sin }
    }

    /// Rotates every head of `row` (length `n_heads · head_dim`) to position
    /// `pos`; `inverse` rotates back, which is also the gradient map.
    pub fn apply(&self, row: &mut [f32], pos: usize, inverse: bool) {
        let hd = self.half * 2;
        let cs = &self.cos[pos * self.half..(pos + 1) * self.half];
        let sn = &self.sin[pos * self.half..(pos + 1) * self.half];
        for head in row.chunks_exact_mut(hd) {
            for i in 0..self.half {
                let (a, b) = (head[2 * i], head[2 * i + 1]);
                let (c, s) = (cs[i], if inverse { -sn[i] } else { sn[i] });
                head[2 * i] = a * c - b * s;
                head[2 * i + 1] = a * s + b * c;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rmsnorm_unit_rms() {
        let x = DenseMatrix::from_fn(3, 64, |i, j| ((i * 64 + j) as f32 * 0.37).sin() * (i + 1) as f32);
        let (y, _) = rmsnorm(&x, &vec![1.0; 64]);
        for t in 0..3 {
            let rms = (y.row(t).iter().map(|v| v * v).sum::<f32>() / 64.0).sqrt();
            assert!((rms - 1.0).abs() < 1e-5, "{rms}");
        }
    }

    #[test]
    fn rope_inverse_round_trips() {
        let table = RopeTable::new(16, 8, 10000.0);
        let orig: Vec<f32> = (0..16).map(|i| i as f32 * 0.1 - 0.7).collect();
        let mut row = orig.clone();
        table.apply(&mut row, 11, false);
        assert_ne!(row, orig);
        table.apply(&mut row, 11, true);
        for (a, b) in row.iter().zip(&orig) {
            assert!((a - b).abs() < 1e-6);
        }
        // position zero is the identity
        let mut row = orig.clone();
        table.apply(&mut row, 0, false);
        assert_eq!(row, orig);
    }

    #[test]
    fn silu_grad_matches_difference() {
        for &x in &[-3.0f32, -0.5, 0.0, 0.7, 4.0] {
            let h = 1e-3;
            let fd = (silu(x + h) - silu(x - h)) / (2.0 * h);
            assert!((fd - silu_grad(x)).abs() < 1e-3);
        }
    }
}
