//! Library numerics against independent reference computations.

mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use common::{naive_matmul, to_f64};
use signdelta::delta::{compress_stack, mean_abs, packed_matvec, PackedSignMatrix};
use signdelta::distill::{adam_step, AdamState, DistillConfig};
use signdelta::lowrank::{cev_of, svd, truncate_delta};
use signdelta::DenseMatrix;

fn gaussian(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DenseMatrix::from_fn(rows, cols, |_, _| rng.sample::<f32, _>(StandardNormal))
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn products_match_triple_loop() {
    for (seed, (n, k, m)) in [(1, (3, 5, 4)), (2, (17, 9, 33)), (3, (1, 64, 7))] {
        let a = gaussian(n, k, seed);
        let b = gaussian(k, m, seed + 10);
        let want = naive_matmul(&to_f64(&a), &to_f64(&b), n, k, m);
        assert!(max_diff(&to_f64(&a.matmul(&b).unwrap()), &want) < 1e-4);
        assert!(max_diff(&to_f64(&a.matmul_t(&b.transpose()).unwrap()), &want) < 1e-4);
        assert!(max_diff(&to_f64(&a.transpose().t_matmul(&b).unwrap()), &want) < 1e-4);
    }
}

#[test]
fn mean_abs_beats_every_grid_scale() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..20 {
        let (r, c) = (rng.random_range(8..64), rng.random_range(8..64));
        let d = gaussian(r, c, rng.random());
        let abs: Vec<f64> = d.data().iter().map(|v| v.abs() as f64).collect();
        let loss = |a: f64| abs.iter().map(|v| (v - a) * (v - a)).sum::<f64>();
        let best = loss(mean_abs(&d) as f64);
        let hi = abs.iter().cloned().fold(0.0, f64::max);
        for i in 0..=1000 {
            assert!(best <= loss(hi * i as f64 / 1000.0));
        }
    }
}

#[test]
fn packed_matvec_matches_dense_signs() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..50 {
        let (r, c) = (rng.random_range(1..70), rng.random_range(1..70));
        let p = PackedSignMatrix::from_values(&gaussian(r, c, rng.random()), rng.random_range(0.01..2.0));
        let x: Vec<f32> = (0..c).map(|_| rng.sample(StandardNormal)).collect();
        let got = packed_matvec(&p, &x).unwrap();
        for i in 0..r {
            let want: f64 = (0..c)
                .map(|j| {
                    let s = if p.signs()[i * c + j] { 1.0 } else { -1.0 };
                    p.scale() as f64 * s * x[j] as f64
                })
                .sum();
            assert!((got[i] as f64 - want).abs() <= 1e-5 * (1.0 + want.abs()));
        }
    }
}

#[test]
fn one_bit_error_on_gaussian_is_one_minus_two_over_pi() {
    let d = gaussian(256, 256, 11);
    let stack = compress_stack(&DenseMatrix::zeros(256, 256), &d, 1).unwrap();
    let err = d.sub(&stack.reconstruct()).unwrap().frobenius_norm().powi(2) / d.frobenius_norm().powi(2);
    let analytic = 1.0 - 2.0 / std::f64::consts::PI;
    assert!((err - analytic).abs() < 0.01, "{err} vs {analytic}");
}

#[test]
fn residual_shrinks_with_each_plane() {
    let d = gaussian(64, 48, 12);
    let zero = DenseMatrix::zeros(64, 48);
    let mut last = d.frobenius_norm();
    for k in 1..=8 {
        let r = d.sub(&compress_stack(&zero, &d, k).unwrap().reconstruct()).unwrap().frobenius_norm();
        assert!(r < last, "plane {k}: {r} >= {last}");
        last = r;
    }
}

/// Eigenvalues of a symmetric `f64` matrix by cyclic Jacobi rotations.
fn symmetric_eigenvalues(mut a: Vec<f64>, n: usize) -> Vec<f64> {
    for _ in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i * n + j].powi(2)).sum();
        if off < 1e-22 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k * n + p], a[k * n + q]);
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p * n + k], a[q * n + k]);
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a[i * n + i]).collect();
    ev.sort_by(|x, y| y.total_cmp(x));
    ev
}

#[test]
fn singular_values_match_gram_eigenvalues() {
    for (seed, (n, m)) in [(1, (12, 8)), (2, (8, 12)), (3, (20, 20))] {
        let a = gaussian(n, m, seed);
        let s = svd(&a).unwrap();
        let af = to_f64(&a);
        let at = to_f64(&a.transpose());
        let gram = naive_matmul(&at, &af, m, n, m);
        let ev = symmetric_eigenvalues(gram, m);
        for (i, sv) in s.singular_values.iter().enumerate() {
            assert!((sv * sv - ev[i]).abs() < 1e-4 * (1.0 + ev[i]), "{seed}: σ{i}² {} vs {}", sv * sv, ev[i]);
        }
        // u · diag(σ) · vt reproduces the input
        let k = n.min(m);
        let mut us = to_f64(&s.u);
        for i in 0..n {
            for j in 0..k {
                us[i * k + j] *= s.singular_values[j];
            }
        }
        assert!(max_diff(&naive_matmul(&us, &to_f64(&s.vt), n, k, m), &af) < 1e-4);
    }
}

#[test]
fn truncation_error_is_tail_energy_and_optimal() {
    let d = gaussian(24, 16, 4);
    let sv = svd(&d).unwrap().singular_values;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for r in [1, 4, 10] {
        let lr = truncate_delta(&d, r).unwrap();
        let err = d.sub(&lr.reconstruct()).unwrap().frobenius_norm().powi(2);
        let tail: f64 = sv[r..].iter().map(|s| s * s).sum();
        assert!((err - tail).abs() < 1e-3 * tail, "rank {r}: {err} vs {tail}");
        for _ in 0..20 {
            let other = gaussian(24, r, rng.random()).matmul(&gaussian(r, 16, rng.random())).unwrap().scale(0.1);
            assert!(d.sub(&other).unwrap().frobenius_norm().powi(2) >= err);
        }
    }
    let cev = cev_of(&sv).unwrap();
    assert!((cev.values[15] - 1.0).abs() < 1e-12);
    assert!(cev.values.windows(2).all(|w| w[0] <= w[1]));
}

/// Textbook Adam on one scalar.
fn adam_reference(grads: &[f64], lr: f64, b1: f64, b2: f64, eps: f64, x0: f64) -> Vec<f64> {
    let (mut x, mut m, mut v) = (x0, 0.0, 0.0);
    let mut out = Vec::new();
    for (t, g) in grads.iter().enumerate() {
        let t = (t + 1) as i32;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t));
        let vh = v / (1.0 - b2.powi(t));
        x -= lr * mh / (vh.sqrt() + eps);
        out.push(x);
    }
    out
}

#[test]
fn adam_matches_scalar_reference() {
    let cfg = DistillConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let grads: Vec<f64> = (0..100).map(|_| rng.random_range(-1.0..1.0)).collect();
    let want = adam_reference(&grads, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, 0.3);
    let mut x = [0.3];
    let mut state = AdamState::new(1);
    for (g, w) in grads.iter().zip(&want) {
        adam_step("x", &mut x, &[*g], &mut state, &cfg).unwrap();
        assert!((x[0] - w).abs() < 1e-12);
    }
}
