//! Whole-model deltas: which tensors get binarized, the `.bdelta` container,
//! and merging a delta back onto its base.
//!
//! `.bdelta` layout (all integers little-endian):
//!
//! ```text
//! "BDLT" | u32 version = 1 | u32 header_len | header JSON | payload
//! ```
//!
//! The header is `{"policy": .., "tensors": [{name, rows, cols, kind,
//! planes, scales, payload_offset, payload_len}, ..]}`. Packed tensors store
//! `planes` consecutive bit planes of `ceil(rows·cols/8)` bytes; raw tensors
//! store `rows·cols` `f32` values.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::ModelCheckpoint;
use crate::config::is_block_linear;
use crate::delta::{compress_stack, packed_len, DeltaStack, PackedSignMatrix};
use crate::error::{Error, Result};
use crate::tensor::DenseMatrix;

pub const MAGIC: &[u8; 4] = b"BDLT";
pub const VERSION: u32 = 1;

/// Which tensors are binarized; everything else is kept as a raw `f32` delta.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum QuantPolicy {
    /// Attention and MLP projections of the transformer blocks.
    BlockLinear,
    /// Nothing is binarized; the delta is lossless.
    Nothing,
    /// Every 2-D tensor with more than one row.
    AllMatrices,
    Names(BTreeSet<String>),
}

impl QuantPolicy {
    pub fn matches(&self, name: &str, shape: (usize, usize)) -> bool {
        match self {
            QuantPolicy::BlockLinear => is_block_linear(name),
            QuantPolicy::Nothing => false,
            QuantPolicy::AllMatrices => shape.0 > 1,
            QuantPolicy::Names(names) => names.contains(name),
        }
    }

    pub fn label(&self) -> String {
        match self {
            QuantPolicy::BlockLinear => "block-linear".into(),
            QuantPolicy::Nothing => "none".into(),
            QuantPolicy::AllMatrices => "all-matrices".into(),
            QuantPolicy::Names(n) => format!("names:{}", n.iter().cloned().collect::<Vec<_>>().join(",")),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "block-linear" | "linear" => Ok(QuantPolicy::BlockLinear),
            "none" => Ok(QuantPolicy::Nothing),
            "all-matrices" | "all" => Ok(QuantPolicy::AllMatrices),
            other => match other.strip_prefix("names:") {
                Some(list) => Ok(QuantPolicy::Names(
                    list.split(',').filter(|s| !s.is_empty()).map(str::to_string).collect(),
                )),
                None => Err(Error::Invalid(format!("unknown policy `{other}`"))),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DeltaEntry {
    Packed(DeltaStack),
    Raw(DenseMatrix),
}

impl DeltaEntry {
    pub fn shape(&self) -> (usize, usize) {
        match self {
            DeltaEntry::Packed(s) => s.shape(),
            DeltaEntry::Raw(m) => m.shape(),
        }
    }

    pub fn reconstruct(&self) -> DenseMatrix {
        match self {
            DeltaEntry::Packed(s) => s.reconstruct(),
            DeltaEntry::Raw(m) => m.clone(),
        }
    }

    /// Bytes resident when this entry is loaded: payload plus scales.
    pub fn storage_bytes(&self) -> usize {
        match self {
            DeltaEntry::Packed(s) => s.storage_bytes(),
            DeltaEntry::Raw(m) => m.len() * 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeltaFile {
    pub entries: BTreeMap<String, DeltaEntry>,
    pub policy: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    policy: String,
    tensors: Vec<HeaderTensor>,
}

#[derive(Debug, Serialize, Deserialize)]
struct HeaderTensor {
    name: String,
    rows: usize,
    cols: usize,
    kind: String,
    planes: usize,
    scales: Vec<f64>,
    payload_offset: usize,
    payload_len: usize,
}

impl DeltaFile {
    pub fn quantized_names(&self) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|(_, e)| matches!(e, DeltaEntry::Packed(_)))
            .map(|(n, _)| n.as_str())
            .collect()
    }

    pub fn raw_names(&self) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|(_, e)| matches!(e, DeltaEntry::Raw(_)))
            .map(|(n, _)| n.as_str())
            .collect()
    }

    pub fn stack(&self, name: &str) -> Option<&DeltaStack> {
        match self.entries.get(name) {
            Some(DeltaEntry::Packed(s)) => Some(s),
            _ => None,
        }
    }

    /// Every packed `(name, plane index, scale)` in file order.
    pub fn scales(&self) -> Vec<(String, usize, f32)> {
        let mut out = Vec::new();
        for (name, e) in &self.entries {
            if let DeltaEntry::Packed(s) = e {
                for (k, p) in s.planes().iter().enumerate() {
                    out.push((name.clone(), k, p.scale()));
                }
            }
        }
        out
    }

    /// Resident size: sum of payload bytes plus 4 bytes per scale.
    pub fn storage_bytes(&self) -> usize {
        self.entries.values().map(DeltaEntry::storage_bytes).sum()
    }

    /// Checks names and shapes against a base checkpoint.
    pub fn check_against(&self, base: &ModelCheckpoint) -> Result<()> {
        for (name, t) in &base.tensors {
            let e = self
                .entries
                .get(name)
                .ok_or_else(|| Error::MissingTensor(name.clone()))?;
            if e.shape() != t.shape() {
                return Err(Error::ShapeMismatch {
                    name: name.clone(),
                    expected: t.shape(),
                    got: e.shape(),
                });
            }
        }
        if let Some(extra) = self.entries.keys().find(|k| !base.tensors.contains_key(*k)) {
            return Err(Error::UnexpectedTensor(extra.clone()));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        let mut tensors = Vec::with_capacity(self.entries.len());
        for (name, e) in &self.entries {
            let (rows, cols) = e.shape();
            let offset = payload.len();
            let (kind, planes, scales) = match e {
                DeltaEntry::Packed(s) => {
                    for p in s.planes() {
                        payload.extend_from_slice(p.bits());
                    }
                    ("packed", s.planes().len(), s.scales().into_iter().map(f64::from).collect())
                }
                DeltaEntry::Raw(m) => {
                    for v in m.data() {
                        payload.extend_from_slice(&v.to_le_bytes());
                    }
                    ("raw", 0, Vec::new())
                }
            };
            tensors.push(HeaderTensor {
                name: name.clone(),
                rows,
                cols,
                kind: kind.to_string(),
                planes,
                scales,
                payload_offset: offset,
                payload_len: payload.len() - offset,
            });
        }
        let header = serde_json::to_vec(&Header {
            policy: self.policy.clone(),
            tensors,
        })
        .expect("delta header");
        let mut out = Vec::with_capacity(12 + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        out
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::BadDeltaFile(m);
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(bad("missing BDLT magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        if 12 + header_len > bytes.len() {
            return Err(bad("header overruns file".into()));
        }
        let header: Header = serde_json::from_slice(&bytes[12..12 + header_len])
            .map_err(|e| bad(format!("header JSON: {e}")))?;
        let payload = &bytes[12 + header_len..];
        let mut entries = BTreeMap::new();
        let mut spans = Vec::new();
        for t in header.tensors {
            let end = t
                .payload_offset
                .checked_add(t.payload_len)
                .filter(|&end| end <= payload.len())
                .ok_or_else(|| bad(format!("tensor `{}`: payload out of range", t.name)))?;
            spans.push((t.payload_offset, end, t.name.clone()));
            let data = &payload[t.payload_offset..end];
            let entry = match t.kind.as_str() {
                "packed" => {
                    if t.planes == 0 || t.scales.len() != t.planes {
                        return Err(bad(format!(
                            "tensor `{}`: {} planes with {} scales",
                            t.name,
                            t.planes,
                            t.scales.len()
                        )));
                    }
                    let plane_len = packed_len(t.rows, t.cols);
                    if t.payload_len != plane_len * t.planes {
                        return Err(bad(format!("tensor `{}`: payload length {}", t.name, t.payload_len)));
                    }
                    let planes = data
                        .chunks_exact(plane_len.max(1))
                        .take(t.planes)
                        .zip(&t.scales)
                        .map(|(bits, &s)| PackedSignMatrix::from_parts(t.rows, t.cols, s as f32, bits.to_vec()))
                        .collect::<Result<Vec<_>>>()?;
                    DeltaEntry::Packed(DeltaStack::new(planes)?)
                }
                "raw" => {
                    if t.payload_len != t.rows * t.cols * 4 {
                        return Err(bad(format!("tensor `{}`: payload length {}", t.name, t.payload_len)));
                    }
                    let vals = data
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                        .collect();
                    DeltaEntry::Raw(DenseMatrix::new(t.rows, t.cols, vals)?)
                }
                other => return Err(bad(format!("tensor `{}`: unknown kind `{other}`", t.name))),
            };
            if entries.insert(t.name.clone(), entry).is_some() {
                return Err(bad(format!("duplicate tensor `{}`", t.name)));
            }
        }
        spans.sort();
        for w in spans.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(bad(format!("tensor `{}` overlaps `{}`", w[1].2, w[0].2)));
            }
        }
        Ok(DeltaFile {
            entries,
            policy: header.policy,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&bytes)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Binarizes the policy-selected tensors of `fine − base` into `bits`-plane
/// stacks; every other tensor is stored as an exact `f32` difference.
pub fn build_delta_file(
    base: &ModelCheckpoint,
    fine: &ModelCheckpoint,
    bits: usize,
    policy: &QuantPolicy,
) -> Result<DeltaFile> {
    if bits == 0 {
        return Err(Error::ZeroPlanes);
    }
    base.check_compatible(fine)?;
    let entries = base
        .tensors
        .par_iter()
        .map(|(name, b)| {
            let f = &fine.tensors[name];
            let entry = if policy.matches(name, b.shape()) {
                DeltaEntry::Packed(compress_stack(b, f, bits)?)
            } else {
                DeltaEntry::Raw(exact_difference(b, f))
            };
            Ok((name.clone(), entry))
        })
        .collect::<Result<BTreeMap<_, _>>>()?;
    Ok(DeltaFile {
        entries,
        policy: policy.label(),
    })
}

/// `fine − base`, nudged per element so that `base + d` rounds back to
/// exactly `fine` wherever some `f32` allows it.
fn exact_difference(base: &DenseMatrix, fine: &DenseMatrix) -> DenseMatrix {
    let data = base
        .data()
        .iter()
        .zip(fine.data())
        .map(|(&b, &f)| {
            let mut d = f - b;
            for _ in 0..4 {
                let r = b + d;
                if r == f {
                    break;
                }
                d += f - r;
            }
            d
        })
        .collect();
    DenseMatrix::new(base.rows(), base.cols(), data).expect("same shape")
}

/// Merged form: `base + reconstruction` for every tensor.
pub fn apply_delta(base: &ModelCheckpoint, delta: &DeltaFile) -> Result<ModelCheckpoint> {
    delta.check_against(base)?;
    let tensors = base
        .tensors
        .par_iter()
        .map(|(name, b)| {
            let merged = match &delta.entries[name] {
                DeltaEntry::Raw(d) => b.add(d)?,
                DeltaEntry::Packed(s) => b.add(&s.reconstruct())?,
            };
            Ok((name.clone(), merged))
        })
        .collect::<Result<BTreeMap<_, _>>>()?;
    Ok(ModelCheckpoint {
        tensors,
        config: base.config,
        origin: base.origin,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ToyArchConfig;
    use crate::synth::{random_checkpoint, perturb, Perturbation};

    fn tiny() -> ToyArchConfig {
        ToyArchConfig {
            vocab: 16,
            dim: 8,
            n_layers: 2,
            n_heads: 2,
            intermediate: 12,
            max_seq: 8,
            rope_theta: 10000.0,
        }
    }

    fn pair(seed: u64) -> (ModelCheckpoint, ModelCheckpoint) {
        let base = random_checkpoint(&tiny(), seed).unwrap();
        let fine = perturb(&base, Perturbation::Gaussian(0.05), &QuantPolicy::AllMatrices, seed + 1).unwrap();
        (base, fine)
    }

    #[test]
    fn lossless_policy_reproduces_fine() {
        let (base, fine) = pair(1);
        let delta = build_delta_file(&base, &fine, 1, &QuantPolicy::Nothing).unwrap();
        assert!(delta.quantized_names().is_empty());
        let merged = apply_delta(&base, &delta).unwrap();
        assert_eq!(merged, fine);
    }

    #[test]
    fn default_policy_counts() {
        let (base, fine) = pair(2);
        let delta = build_delta_file(&base, &fine, 1, &QuantPolicy::BlockLinear).unwrap();
        assert_eq!(delta.quantized_names().len(), 7 * tiny().n_layers);
        let all: BTreeSet<&str> = delta.quantized_names().into_iter().chain(delta.raw_names()).collect();
        let names: BTreeSet<&str> = base.tensors.keys().map(String::as_str).collect();
        assert_eq!(all, names);
    }

    #[test]
    fn identical_models_give_zero_delta() {
        let (base, _) = pair(3);
        let delta = build_delta_file(&base, &base, 2, &QuantPolicy::BlockLinear).unwrap();
        assert!(delta.scales().iter().all(|(_, _, s)| *s == 0.0));
        for name in delta.raw_names() {
            assert!(delta.entries[name].reconstruct().data().iter().all(|&v| v == 0.0));
        }
        assert_eq!(apply_delta(&base, &delta).unwrap(), base);
    }

    #[test]
    fn mismatched_checkpoints_rejected() {
        let (base, mut fine) = pair(4);
        fine.tensors.insert("embed".into(), DenseMatrix::zeros(3, 3));
        assert!(matches!(
            build_delta_file(&base, &fine, 1, &QuantPolicy::BlockLinear),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn bytes_round_trip() {
        let (base, fine) = pair(5);
        let delta = build_delta_file(&base, &fine, 3, &QuantPolicy::BlockLinear).unwrap();
        let bytes = delta.to_bytes();
        assert_eq!(&bytes[..4], b"BDLT");
        let parsed = DeltaFile::parse(&bytes).unwrap();
        assert_eq!(parsed, delta);
        for ((_, _, a), (_, _, b)) in parsed.scales().iter().zip(delta.scales()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(parsed.to_bytes(), bytes);
    }

    #[test]
    fn corrupt_files_rejected() {
        let (base, fine) = pair(6);
        let bytes = build_delta_file(&base, &fine, 1, &QuantPolicy::BlockLinear).unwrap().to_bytes();
        assert!(DeltaFile::parse(&bytes[..bytes.len() - 1]).is_err());
        let mut wrong_magic = bytes.clone();
        wrong_magic[0] = b'X';
        assert!(DeltaFile::parse(&wrong_magic).is_err());
        let mut wrong_version = bytes.clone();
        wrong_version[4] = 2;
        assert!(DeltaFile::parse(&wrong_version).is_err());
    }

    #[test]
    fn policy_parsing() {
        assert_eq!(QuantPolicy::parse("linear").unwrap(), QuantPolicy::BlockLinear);
        assert_eq!(QuantPolicy::parse("none").unwrap(), QuantPolicy::Nothing);
        let names = QuantPolicy::parse("names:a,b").unwrap();
        assert!(names.matches("a", (2, 2)) && !names.matches("c", (2, 2)));
        assert!(QuantPolicy::parse("bogus").is_err());
    }
}
