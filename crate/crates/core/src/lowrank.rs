//! Low-rank delta baseline: SVD, Eckart–Young truncation, cumulative
//! explained variance and memory-equivalent rank.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;

use crate::checkpoint::{ModelCheckpoint, RawTensor, SafetensorsFile};
use crate::delta_file::QuantPolicy;
use crate::error::{Error, Result};
use crate::tensor::DenseMatrix;

const MAX_SWEEPS: usize = 80;

/// `m ≈ u · diag(singular_values) · vt`, with `u` of shape `n×k`, `vt` of
/// shape `k×m`, `k = min(n, m)` and singular values non-increasing.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: DenseMatrix,
    pub singular_values: Vec<f64>,
    pub vt: DenseMatrix,
}

/// One-sided Jacobi (Hestenes) SVD, carried out in `f64`.
pub fn svd(m: &DenseMatrix) -> Result<Svd> {
    if !m.is_finite() {
        return Err(Error::NonFinite("svd input".into()));
    }
    let (n, cols) = m.shape();
    if n < cols {
        let t = jacobi(&m.transpose())?;
        return Ok(Svd {
            u: t.vt.transpose(),
            singular_values: t.singular_values,
            vt: t.u.transpose(),
        });
    }
    jacobi(m)
}

fn jacobi(m: &DenseMatrix) -> Result<Svd> {
    let (n, k) = m.shape();
    // columns of the working matrix and of V, each contiguous
    let mut a: Vec<Vec<f64>> = (0..k).map(|j| (0..n).map(|i| m.get(i, j) as f64).collect()).collect();
    let mut v: Vec<Vec<f64>> = (0..k)
        .map(|j| (0..k).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    let tol = 1e-13;
    // columns this small relative to the whole matrix are rounding noise
    let negligible = a.iter().flatten().map(|x| x * x).sum::<f64>() * 1e-28;
    let mut converged = k < 2;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..k {
            for q in p + 1..k {
                let (alpha, beta, gamma) = {
                    let (ap, aq) = (&a[p], &a[q]);
                    let mut al = 0.0;
                    let mut be = 0.0;
                    let mut ga = 0.0;
                    for i in 0..n {
                        al += ap[i] * ap[i];
                        be += aq[i] * aq[i];
                        ga += ap[i] * aq[i];
                    }
                    (al, be, ga)
                };
                if gamma == 0.0 || alpha.min(beta) <= negligible || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut a, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NoConvergence(MAX_SWEEPS));
    }

    let mut order: Vec<(f64, usize)> = a
        .iter()
        .enumerate()
        .map(|(j, col)| (col.iter().map(|x| x * x).sum::<f64>().sqrt(), j))
        .collect();
    order.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));

    let smax = order.first().map_or(0.0, |o| o.0);
    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut sigma = Vec::with_capacity(k);
    for &(s, j) in &order {
        if s > smax * 1e-12 && s > 0.0 {
            u_cols.push(a[j].iter().map(|x| x / s).collect());
        } else {
            u_cols.push(complete_basis(&u_cols, n));
        }
        sigma.push(if s > smax * 1e-12 { s } else { 0.0 });
    }
    let u = DenseMatrix::from_fn(n, k, |i, c| u_cols[c][i] as f32);
    let vt = DenseMatrix::from_fn(k, k, |r, c| v[order[r].1][c] as f32);
    Ok(Svd {
        u,
        singular_values: sigma,
        vt,
    })
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let (cp, cq) = (&mut lo[p], &mut hi[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (xp, xq) = (*x, *y);
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// A unit vector orthogonal to `basis`, found by Gram–Schmidt on the
/// standard basis.
fn complete_basis(basis: &[Vec<f64>], n: usize) -> Vec<f64> {
    for e in 0..n {
        let mut cand = vec![0.0; n];
        cand[e] = 1.0;
        for _ in 0..2 {
            for b in basis {
                let d: f64 = b.iter().zip(&cand).map(|(x, y)| x * y).sum();
                for (c, x) in cand.iter_mut().zip(b) {
                    *c -= d * x;
                }
            }
        }
        let norm = cand.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return cand.into_iter().map(|x| x / norm).collect();
        }
    }
    vec![0.0; n]
}

/// `A · B` with `A` of shape `n×r` and `B` of shape `r×m`.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankDelta {
    pub a: DenseMatrix,
    pub b: DenseMatrix,
}

impl LowRankDelta {
    pub fn new(a: DenseMatrix, b: DenseMatrix) -> Result<Self> {
        if a.cols() != b.rows() || a.cols() > a.rows().min(b.cols()) {
            return Err(Error::DimensionMismatch {
                op: "low-rank factors",
                left: a.shape(),
                right: b.shape(),
            });
        }
        Ok(Self { a, b })
    }

    pub fn rank(&self) -> usize {
        self.a.cols()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.a.rows(), self.b.cols())
    }

    pub fn reconstruct(&self) -> DenseMatrix {
        self.a.matmul(&self.b).expect("factor shapes checked at construction")
    }

    /// `A (B x)`.
    pub fn matvec(&self, x: &[f32]) -> Result<Vec<f32>> {
        let inner = self.b.matvec(x)?;
        self.a.matvec(&inner)
    }

    pub fn storage_bytes(&self) -> usize {
        (self.a.len() + self.b.len()) * 4
    }
}

/// Best rank-`r` approximation of `fine − base`, split symmetrically:
/// `A = U_r √Σ_r`, `B = √Σ_r V_r`.
pub fn truncate(base: &DenseMatrix, fine: &DenseMatrix, r: usize) -> Result<LowRankDelta> {
    let delta = fine.sub(base)?;
    truncate_delta(&delta, r)
}

pub fn truncate_delta(delta: &DenseMatrix, r: usize) -> Result<LowRankDelta> {
    if r == 0 {
        return Err(Error::ZeroRank);
    }
    let (n, m) = delta.shape();
    if r > n.min(m) {
        return Err(Error::RankTooLarge { rank: r, max: n.min(m) });
    }
    let s = svd(delta)?;
    let root: Vec<f32> = s.singular_values[..r].iter().map(|v| v.sqrt() as f32).collect();
    let a = DenseMatrix::from_fn(n, r, |i, j| s.u.get(i, j) * root[j]);
    let b = DenseMatrix::from_fn(r, m, |i, j| root[i] * s.vt.get(i, j));
    LowRankDelta::new(a, b)
}

/// Cumulative explained variance of a delta's spectrum.
#[derive(Debug, Clone, PartialEq)]
pub struct Cev {
    /// Entry `k-1` is `Σ_{i≤k} σ_i² / Σ_i σ_i²`.
    pub values: Vec<f64>,
    /// Set when the delta is identically zero; `values` are then all ones.
    pub degenerate: bool,
}

impl Cev {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,cev\n");
        for (k, v) in self.values.iter().enumerate() {
            out.push_str(&format!("{},{}\n", k + 1, v));
        }
        out
    }
}

pub fn cev(base: &DenseMatrix, fine: &DenseMatrix) -> Result<Cev> {
    let delta = fine.sub(base)?;
    cev_of(&svd(&delta)?.singular_values)
}

pub fn cev_of(singular_values: &[f64]) -> Result<Cev> {
    let total: f64 = singular_values.iter().map(|s| s * s).sum();
    if total == 0.0 {
        return Ok(Cev {
            values: vec![1.0; singular_values.len()],
            degenerate: true,
        });
    }
    let mut acc = 0.0;
    let values = singular_values
        .iter()
        .map(|s| {
            acc += s * s;
            (acc / total).min(1.0)
        })
        .collect();
    Ok(Cev {
        values,
        degenerate: false,
    })
}

/// How the low-rank factors are assumed to be stored when matching the
/// memory of a 1-bit delta.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RankConvention {
    /// 32-bit factors: largest `r` with `32·r·(n+m) ≤ n·m`.
    F32Factors,
    /// 16-bit factors, which doubles the rank (`r = 128` at `4096×4096`).
    F16Factors,
}

pub fn memory_equivalent_rank(n: usize, m: usize) -> usize {
    memory_equivalent_rank_with(n, m, RankConvention::F32Factors)
}

pub fn memory_equivalent_rank_with(n: usize, m: usize, convention: RankConvention) -> usize {
    let bits = match convention {
        RankConvention::F32Factors => 32,
        RankConvention::F16Factors => 16,
    };
    ((n * m) / (bits * (n + m))).max(1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RankChoice {
    Fixed(usize),
    MemoryEquivalent(RankConvention),
    Full,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LowRankEntry {
    LowRank(LowRankDelta),
    Raw(DenseMatrix),
}

impl LowRankEntry {
    pub fn reconstruct(&self) -> DenseMatrix {
        match self {
            LowRankEntry::LowRank(l) => l.reconstruct(),
            LowRankEntry::Raw(m) => m.clone(),
        }
    }
}

/// Whole-model low-rank delta. Stored as safetensors with `{name}.lr_a` /
/// `{name}.lr_b` factor pairs and `{name}.raw` full-precision deltas.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankFile {
    pub entries: BTreeMap<String, LowRankEntry>,
}

impl LowRankFile {
    pub fn build(
        base: &ModelCheckpoint,
        fine: &ModelCheckpoint,
        rank: RankChoice,
        policy: &QuantPolicy,
    ) -> Result<Self> {
        base.check_compatible(fine)?;
        let entries = base
            .tensors
            .par_iter()
            .map(|(name, b)| {
                let delta = fine.tensors[name].sub(b)?;
                let entry = if policy.matches(name, b.shape()) {
                    let (n, m) = b.shape();
                    let r = match rank {
                        RankChoice::Fixed(r) => r,
                        RankChoice::MemoryEquivalent(c) => memory_equivalent_rank_with(n, m, c),
                        RankChoice::Full => n.min(m),
                    };
                    LowRankEntry::LowRank(truncate_delta(&delta, r)?)
                } else {
                    LowRankEntry::Raw(delta)
                };
                Ok((name.clone(), entry))
            })
            .collect::<Result<BTreeMap<_, _>>>()?;
        Ok(Self { entries })
    }

    pub fn apply(&self, base: &ModelCheckpoint) -> Result<ModelCheckpoint> {
        let mut tensors = BTreeMap::new();
        for (name, b) in &base.tensors {
            let e = self
                .entries
                .get(name)
                .ok_or_else(|| Error::MissingTensor(name.clone()))?;
            tensors.insert(name.clone(), b.add(&e.reconstruct())?);
        }
        Ok(ModelCheckpoint {
            tensors,
            config: base.config,
            origin: base.origin,
        })
    }

    pub fn to_safetensors(&self) -> SafetensorsFile {
        let mut file = SafetensorsFile::default();
        file.metadata.insert("format".into(), "lowrank-delta".into());
        for (name, e) in &self.entries {
            match e {
                LowRankEntry::LowRank(l) => {
                    file.tensors.insert(format!("{name}.lr_a"), RawTensor::from_f32(&l.a));
                    file.tensors.insert(format!("{name}.lr_b"), RawTensor::from_f32(&l.b));
                }
                LowRankEntry::Raw(m) => {
                    file.tensors.insert(format!("{name}.raw"), RawTensor::from_f32(m));
                }
            }
        }
        file
    }

    pub fn from_safetensors(file: &SafetensorsFile) -> Result<Self> {
        let ckpt = ModelCheckpoint::from_safetensors(file)?;
        let mut entries = BTreeMap::new();
        let mut pending_a: BTreeMap<String, DenseMatrix> = BTreeMap::new();
        let mut pending_b: BTreeMap<String, DenseMatrix> = BTreeMap::new();
        for (key, m) in ckpt.tensors {
            if let Some(name) = key.strip_suffix(".raw") {
                entries.insert(name.to_string(), LowRankEntry::Raw(m));
            } else if let Some(name) = key.strip_suffix(".lr_a") {
                pending_a.insert(name.to_string(), m);
            } else if let Some(name) = key.strip_suffix(".lr_b") {
                pending_b.insert(name.to_string(), m);
            } else {
                return Err(Error::UnexpectedTensor(key));
            }
        }
        for (name, a) in pending_a {
            let b = pending_b
                .remove(&name)
                .ok_or_else(|| Error::MissingTensor(format!("{name}.lr_b")))?;
            entries.insert(name, LowRankEntry::LowRank(LowRankDelta::new(a, b)?));
        }
        if let Some(name) = pending_b.into_keys().next() {
            return Err(Error::MissingTensor(format!("{name}.lr_a")));
        }
        Ok(Self { entries })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_safetensors(&SafetensorsFile::read(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.to_safetensors().write(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn gaussian(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DenseMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
    }

    fn reconstruct(s: &Svd) -> DenseMatrix {
        let k = s.singular_values.len();
        let us = DenseMatrix::from_fn(s.u.rows(), k, |i, j| s.u.get(i, j) * s.singular_values[j] as f32);
        us.matmul(&s.vt).unwrap()
    }

    #[test]
    fn diagonal() {
        let m = DenseMatrix::from_rows(&[&[3.0, 0.0], &[0.0, 1.0]]);
        let s = svd(&m).unwrap();
        assert!((s.singular_values[0] - 3.0).abs() < 1e-9);
        assert!((s.singular_values[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn rank_one() {
        let u = gaussian(12, 1, 1);
        let v = gaussian(1, 9, 2);
        let s = svd(&u.matmul(&v).unwrap()).unwrap();
        assert!(s.singular_values[1] / s.singular_values[0] < 1e-6);
        // the completed U columns are still orthonormal
        let utu = s.u.t_matmul(&s.u).unwrap();
        for i in 0..9 {
            for j in 0..9 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((utu.get(i, j) - e).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn wide_and_tall_reconstruct() {
        for (r, c) in [(20, 7), (7, 20), (16, 16)] {
            let m = gaussian(r, c, (r * 31 + c) as u64);
            let s = svd(&m).unwrap();
            assert_eq!(s.u.shape(), (r, r.min(c)));
            assert_eq!(s.vt.shape(), (r.min(c), c));
            let err = reconstruct(&s).sub(&m).unwrap().frobenius_norm() / m.frobenius_norm();
            assert!(err < 1e-5, "{r}x{c}: {err}");
            assert!(s.singular_values.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn truncate_limits() {
        let base = DenseMatrix::zeros(4, 6);
        let fine = gaussian(4, 6, 3);
        assert!(matches!(truncate(&base, &fine, 5), Err(Error::RankTooLarge { .. })));
        assert!(matches!(truncate(&base, &fine, 0), Err(Error::ZeroRank)));
        let full = truncate(&base, &fine, 4).unwrap();
        let err = full.reconstruct().sub(&fine).unwrap().frobenius_norm() / fine.frobenius_norm();
        assert!(err < 1e-4);
    }

    #[test]
    fn cev_cases() {
        let u = gaussian(10, 1, 4);
        let v = gaussian(1, 10, 5);
        let c = cev(&DenseMatrix::zeros(10, 10), &u.matmul(&v).unwrap()).unwrap();
        assert!((c.values[0] - 1.0).abs() < 1e-9);
        let z = cev(&DenseMatrix::zeros(3, 3), &DenseMatrix::zeros(3, 3)).unwrap();
        assert!(z.degenerate && z.values == vec![1.0; 3]);
        assert!(c.to_csv().starts_with("k,cev\n1,"));
    }

    #[test]
    fn memory_equivalence_arithmetic() {
        assert_eq!(memory_equivalent_rank(4096, 4096), 64);
        assert_eq!(memory_equivalent_rank_with(4096, 4096, RankConvention::F16Factors), 128);
        assert_eq!(memory_equivalent_rank(64, 64), 1);
        assert_eq!(memory_equivalent_rank(8192, 8192), 128);
    }
}
