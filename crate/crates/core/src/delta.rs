//! 1-bit weight deltas: a sign plane packed one bit per element plus a
//! single per-matrix scale, and stacks of such planes fitted to successive
//! residuals.

use crate::error::{Error, Result};
use crate::tensor::DenseMatrix;

/// `+1` iff `x > 0`; zero maps to `-1`.
#[inline]
pub fn sign(x: f32) -> f32 {
    if x > 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// `scale · S` with `S ∈ {±1}^{rows×cols}` stored row-major, LSB-first,
/// bit `1 ↦ +1`, bit `0 ↦ −1`.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedSignMatrix {
    rows: usize,
    cols: usize,
    scale: f32,
    bits: Vec<u8>,
}

pub fn packed_len(rows: usize, cols: usize) -> usize {
    (rows * cols).div_ceil(8)
}

impl PackedSignMatrix {
    /// Packs the signs of `values` (per [`sign`]) with the given scale.
    pub fn from_values(values: &DenseMatrix, scale: f32) -> Self {
        let (rows, cols) = values.shape();
        let mut bits = vec![0u8; packed_len(rows, cols)];
        for (idx, &v) in values.data().iter().enumerate() {
            if v > 0.0 {
                bits[idx >> 3] |= 1 << (idx & 7);
            }
        }
        Self {
            rows,
            cols,
            scale,
            bits,
        }
    }

    /// Packs an explicit `±1` pattern given as booleans (`true ↦ +1`).
    pub fn from_signs(rows: usize, cols: usize, positive: &[bool], scale: f32) -> Result<Self> {
        if positive.len() != rows * cols {
            return Err(Error::Invalid(format!(
                "sign pattern of {} entries for {rows}x{cols}",
                positive.len()
            )));
        }
        let mut bits = vec![0u8; packed_len(rows, cols)];
        for (idx, _) in positive.iter().enumerate().filter(|(_, &p)| p) {
            bits[idx >> 3] |= 1 << (idx & 7);
        }
        Ok(Self {
            rows,
            cols,
            scale,
            bits,
        })
    }

    /// Reassembles a plane read from disk. Rejects wrong lengths, negative or
    /// non-finite scales and stray trailing bits.
    pub fn from_parts(rows: usize, cols: usize, scale: f32, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != packed_len(rows, cols) {
            return Err(Error::BadDeltaFile(format!(
                "{rows}x{cols} plane needs {} bytes, got {}",
                packed_len(rows, cols),
                bits.len()
            )));
        }
        if !(scale.is_finite() && scale >= 0.0) {
            return Err(Error::BadDeltaFile(format!("invalid scale {scale}")));
        }
        let used = (rows * cols) % 8;
        if used != 0 && bits.last().is_some_and(|&b| b >> used != 0) {
            return Err(Error::BadDeltaFile("unused trailing bits must be zero".into()));
        }
        Ok(Self {
            rows,
            cols,
            scale,
            bits,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn scale(&self) -> f32 {
        self.scale
    }

    pub fn set_scale(&mut self, scale: f32) {
        self.scale = scale;
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    #[inline]
    pub fn is_positive(&self, idx: usize) -> bool {
        (self.bits[idx >> 3] >> (idx & 7)) & 1 == 1
    }

    /// The `±1` pattern as booleans (`true ↦ +1`).
    pub fn signs(&self) -> Vec<bool> {
        (0..self.rows * self.cols).map(|i| self.is_positive(i)).collect()
    }

    /// Materializes the sign plane without the scale.
    pub fn sign_matrix(&self) -> DenseMatrix {
        let cols = self.cols;
        DenseMatrix::from_fn(self.rows, cols, |i, j| {
            if self.is_positive(i * cols + j) {
                1.0
            } else {
                -1.0
            }
        })
    }

    /// `Σ_ij g_ij · S_ij`, the derivative of `⟨g, scale·S⟩` with respect to
    /// the scale.
    pub fn signed_sum(&self, g: &DenseMatrix) -> f64 {
        debug_assert_eq!(g.shape(), self.shape());
        g.data()
            .iter()
            .enumerate()
            .map(|(i, &v)| if self.is_positive(i) { v as f64 } else { -(v as f64) })
            .sum()
    }

    /// `scale · S · x` without materializing the dense matrix: each row is
    /// `scale · (2·Σ_{bit=1} x_j − Σ_j x_j)`.
    pub fn matvec(&self, x: &[f32]) -> Result<Vec<f32>> {
        if x.len() != self.cols {
            return Err(Error::DimensionMismatch {
                op: "packed_matvec",
                left: self.shape(),
                right: (x.len(), 1),
            });
        }
        let mut out = vec![0.0; self.rows];
        self.matvec_accumulate(x, &mut out, 1.0);
        Ok(out)
    }

    /// `out += weight · scale · S · x`. Lengths must already be checked.
    pub(crate) fn matvec_accumulate(&self, x: &[f32], out: &mut [f32], weight: f32) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        if self.scale == 0.0 {
            return;
        }
        let total: f64 = x.iter().map(|&v| v as f64).sum();
        let s = (self.scale * weight) as f64;
        if self.rows >= 4 {
            let table = SubsetSums::new(x);
            for (i, o) in out.iter_mut().enumerate() {
                let pos = table.row_sum(&self.bits, i * self.cols, self.cols);
                *o += (s * (2.0 * pos - total)) as f32;
            }
        } else {
            for (i, o) in out.iter_mut().enumerate() {
                let start = i * self.cols;
                let mut pos = 0.0f64;
                for (j, &xj) in x.iter().enumerate() {
                    let idx = start + j;
                    if (self.bits[idx >> 3] >> (idx & 7)) & 1 == 1 {
                        pos += xj as f64;
                    }
                }
                *o += (s * (2.0 * pos - total)) as f32;
            }
        }
    }

    pub fn decompress(&self) -> DenseMatrix {
        let (s, cols) = (self.scale, self.cols);
        DenseMatrix::from_fn(self.rows, cols, |i, j| if self.is_positive(i * cols + j) { s } else { -s })
    }

    /// Packed bytes plus the 4-byte scale.
    pub fn storage_bytes(&self) -> usize {
        self.bits.len() + 4
    }
}

/// Per-byte lookup of subset sums: for each group of eight consecutive
/// inputs, the sum of every one of the 256 subsets. Inputs are zero-padded to
/// a multiple of eight, so the bits a row's last byte borrows from the next
/// row add nothing.
struct SubsetSums {
    table: Vec<f64>,
}

impl SubsetSums {
    fn new(x: &[f32]) -> Self {
        let groups = x.len().div_ceil(8);
        let mut table = vec![0.0f64; groups * 256];
        for (g, t) in table.chunks_exact_mut(256).enumerate() {
            let xs = &x[g * 8..x.len().min(g * 8 + 8)];
            // doubling: the subsets containing input k are those without it, plus x_k
            for (k, &xk) in xs.iter().enumerate() {
                let half = 1 << k;
                let (lo, hi) = t.split_at_mut(half);
                for (h, &l) in hi[..half].iter_mut().zip(lo.iter()) {
                    *h = l + xk as f64;
                }
            }
            for k in xs.len()..8 {
                let half = 1 << k;
                let (lo, hi) = t.split_at_mut(half);
                hi[..half].copy_from_slice(lo);
            }
        }
        Self { table }
    }

    /// `Σ x_j` over the set bits of the row starting at bit `offset`.
    #[inline]
    fn row_sum(&self, bits: &[u8], offset: usize, cols: usize) -> f64 {
        // independent partial sums keep the adds from forming one long chain
        let mut acc = [0.0f64; 4];
        let t = &self.table;
        let n = cols.div_ceil(8);
        let (first, shift) = (offset >> 3, offset & 7);
        if shift == 0 {
            let row = &bits[first..first + n];
            let mut quads = row.chunks_exact(4);
            let mut g = 0;
            for c in &mut quads {
                for (l, &b) in c.iter().enumerate() {
                    acc[l] += t[(g + l) * 256 + b as usize];
                }
                g += 4;
            }
            for (l, &b) in quads.remainder().iter().enumerate() {
                acc[l] += t[(g + l) * 256 + b as usize];
            }
        } else {
            for g in 0..n {
                let lo = bits[first + g] as u16;
                let hi = bits.get(first + g + 1).copied().unwrap_or(0) as u16;
                let b = ((lo | hi << 8) >> shift) as u8;
                acc[g & 3] += t[g * 256 + b as usize];
            }
        }
        (acc[0] + acc[1]) + (acc[2] + acc[3])
    }
}

fn check_same_shape(base: &DenseMatrix, fine: &DenseMatrix) -> Result<()> {
    if base.shape() != fine.shape() {
        return Err(Error::DimensionMismatch {
            op: "compress",
            left: base.shape(),
            right: fine.shape(),
        });
    }
    Ok(())
}

/// Mean absolute value, accumulated in `f64`. This is the `L2`-optimal scale
/// for the sign pattern of `values`.
pub fn mean_abs(values: &DenseMatrix) -> f32 {
    if values.is_empty() {
        return 0.0;
    }
    let sum: f64 = values.data().iter().map(|&v| (v as f64).abs()).sum();
    (sum / values.len() as f64) as f32
}

/// Binarizes `fine − base`.
pub fn compress_tensor(base: &DenseMatrix, fine: &DenseMatrix) -> Result<PackedSignMatrix> {
    check_same_shape(base, fine)?;
    let delta = fine.sub(base)?;
    Ok(compress_residual(&delta))
}

fn compress_residual(delta: &DenseMatrix) -> PackedSignMatrix {
    PackedSignMatrix::from_values(delta, mean_abs(delta))
}

pub fn decompress_tensor(p: &PackedSignMatrix) -> DenseMatrix {
    p.decompress()
}

/// Ordered planes approximating one delta; plane `i` fits whatever planes
/// `0..i` left behind.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaStack {
    planes: Vec<PackedSignMatrix>,
}

impl DeltaStack {
    pub fn new(planes: Vec<PackedSignMatrix>) -> Result<Self> {
        let first = planes.first().ok_or(Error::ZeroPlanes)?;
        let shape = first.shape();
        if let Some(p) = planes.iter().find(|p| p.shape() != shape) {
            return Err(Error::DimensionMismatch {
                op: "delta stack",
                left: shape,
                right: p.shape(),
            });
        }
        Ok(Self { planes })
    }

    pub fn planes(&self) -> &[PackedSignMatrix] {
        &self.planes
    }

    pub fn planes_mut(&mut self) -> &mut [PackedSignMatrix] {
        &mut self.planes
    }

    pub fn shape(&self) -> (usize, usize) {
        self.planes[0].shape()
    }

    pub fn scales(&self) -> Vec<f32> {
        self.planes.iter().map(PackedSignMatrix::scale).collect()
    }

    /// `Σ_k scale_k · S_k`.
    pub fn reconstruct(&self) -> DenseMatrix {
        let (rows, cols) = self.shape();
        let mut out = DenseMatrix::zeros(rows, cols);
        for p in &self.planes {
            let s = p.scale();
            for (idx, o) in out.data_mut().iter_mut().enumerate() {
                *o += if p.is_positive(idx) { s } else { -s };
            }
        }
        out
    }

    pub fn matvec(&self, x: &[f32]) -> Result<Vec<f32>> {
        let (rows, cols) = self.shape();
        if x.len() != cols {
            return Err(Error::DimensionMismatch {
                op: "packed_matvec",
                left: (rows, cols),
                right: (x.len(), 1),
            });
        }
        let mut out = vec![0.0; rows];
        self.matvec_accumulate(x, &mut out);
        Ok(out)
    }

    pub(crate) fn matvec_accumulate(&self, x: &[f32], out: &mut [f32]) {
        for p in &self.planes {
            p.matvec_accumulate(x, out, 1.0);
        }
    }

    pub fn storage_bytes(&self) -> usize {
        self.planes.iter().map(PackedSignMatrix::storage_bytes).sum()
    }
}

/// Fits `k` planes to `fine − base`, each to the residual the previous ones
/// left.
pub fn compress_stack(base: &DenseMatrix, fine: &DenseMatrix, k: usize) -> Result<DeltaStack> {
    if k == 0 {
        return Err(Error::ZeroPlanes);
    }
    check_same_shape(base, fine)?;
    let mut residual = fine.sub(base)?;
    let mut planes = Vec::with_capacity(k);
    for _ in 0..k {
        let plane = compress_residual(&residual);
        let s = plane.scale();
        for (idx, r) in residual.data_mut().iter_mut().enumerate() {
            *r -= if plane.is_positive(idx) { s } else { -s };
        }
        planes.push(plane);
    }
    DeltaStack::new(planes)
}

/// `packed_matvec` over a single plane.
pub fn packed_matvec(p: &PackedSignMatrix, x: &[f32]) -> Result<Vec<f32>> {
    p.matvec(x)
}
