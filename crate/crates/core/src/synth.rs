//! Synthetic base/fine checkpoint pairs for desk-scale experiments.
//!
//! All generated weights sit on a `2^-20` grid and stay well inside `±8`, so
//! sums and differences of them are exact in `f32`. That makes a signed
//! perturbation of size `c` come back out of `fine − base` as exactly `±c`.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::checkpoint::ModelCheckpoint;
use crate::config::ToyArchConfig;
use crate::delta_file::QuantPolicy;
use crate::error::{Error, Result};
use crate::tensor::DenseMatrix;

const GRID: f32 = 1.0 / (1 << 20) as f32;
const LIMIT: f32 = 7.5;

/// Rounds to the generation grid, clamped to the exact range.
pub fn snap(v: f32) -> f32 {
    ((v / GRID).round() * GRID).clamp(-LIMIT, LIMIT)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Perturbation {
    /// `fine = base + c·S` for a random sign matrix `S`.
    Signed(f32),
    /// `fine = base + N(0, σ²)` noise.
    Gaussian(f32),
}

pub fn random_checkpoint(cfg: &ToyArchConfig, seed: u64) -> Result<ModelCheckpoint> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors = BTreeMap::new();
    for (name, (rows, cols)) in cfg.tensor_shapes() {
        let m = if rows == 1 {
            // norm weights hover around one
            let n = Normal::new(1.0f32, 0.05).expect("normal");
            DenseMatrix::from_fn(rows, cols, |_, _| snap(n.sample(&mut rng)))
        } else {
            let std = if name == "embed" { 0.5 } else { 1.0 / (cols as f32).sqrt() };
            let n = Normal::new(0.0f32, std).expect("normal");
            DenseMatrix::from_fn(rows, cols, |_, _| snap(n.sample(&mut rng)))
        };
        tensors.insert(name, m);
    }
    ModelCheckpoint::new(tensors, Some(*cfg))
}

/// Perturbs every tensor selected by `policy`; the rest are copied.
pub fn perturb(
    base: &ModelCheckpoint,
    how: Perturbation,
    policy: &QuantPolicy,
    seed: u64,
) -> Result<ModelCheckpoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors = BTreeMap::new();
    for (name, b) in &base.tensors {
        let t = if policy.matches(name, b.shape()) {
            let data = match how {
                Perturbation::Signed(c) => {
                    let c = snap(c);
                    if !(c > 0.0) {
                        return Err(Error::Invalid("signed perturbation must be positive".into()));
                    }
                    b.data()
                        .iter()
                        .map(|&w| if rng.random::<bool>() { w + c } else { w - c })
                        .collect()
                }
                Perturbation::Gaussian(sigma) => {
                    let n = Normal::new(0.0f32, sigma)
                        .map_err(|_| Error::Invalid(format!("bad sigma {sigma}")))?;
                    b.data().iter().map(|&w| snap(w + snap(n.sample(&mut rng)))).collect()
                }
            };
            DenseMatrix::new(b.rows(), b.cols(), data)?
        } else {
            b.clone()
        };
        tensors.insert(name.clone(), t);
    }
    Ok(ModelCheckpoint {
        tensors,
        config: base.config,
        origin: base.origin,
    })
}

/// Token ids drawn uniformly from the vocabulary.
pub fn random_tokens(vocab: usize, len: usize, seed: u64) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random_range(0..vocab as u32)).collect()
}
