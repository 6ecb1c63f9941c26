//! Multi-tenant serving simulator: one resident backbone shared by many
//! registered deltas, batched decoding across tenants, byte accounting and a
//! wall-clock benchmark.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::Serialize;

use crate::checkpoint::{ModelCheckpoint, OriginDtype};
use crate::config::{is_block_linear, ToyArchConfig};
use crate::delta_file::DeltaFile;
use crate::error::{Error, Result};
use crate::model::{decode_batch, BaseModel, BaseWeight, KvCache, ModelView};
use crate::quant::QuantizedCheckpoint;
use crate::size::{compression_report_for, ArchShape};
use crate::synth::random_tokens;
use crate::tensor::DenseMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    /// One backbone GEMM for the whole batch, packed delta per request.
    Shared,
    /// Every request runs its own merged model.
    Naive,
}

impl fmt::Display for DecodeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DecodeMode::Shared => "shared",
            DecodeMode::Naive => "naive",
        })
    }
}

impl FromStr for DecodeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shared" => Ok(DecodeMode::Shared),
            "naive" => Ok(DecodeMode::Naive),
            other => Err(Error::Invalid(format!("unknown decode mode `{other}`"))),
        }
    }
}

/// One tenant's request: the full token context so far. The step returns
/// logits for the position after the last token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodeRequest {
    pub request_id: u64,
    pub delta_id: String,
    pub context: Vec<u32>,
}

/// Byte model of a serving deployment.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MemoryModel {
    pub backbone_bytes: u64,
    /// Bytes of the block projection matrices inside the backbone.
    pub backbone_linear_bytes: u64,
    pub per_delta_bytes: u64,
    pub naive_per_model_bytes: u64,
    pub kv_bytes_per_token: u64,
    /// Hidden-state and logit buffers of one in-flight request.
    pub work_bytes_per_request: u64,
}

impl MemoryModel {
    pub fn activation_bytes(&self, batch: usize, seq: usize) -> u64 {
        batch as u64 * (seq as u64 * self.kv_bytes_per_token + self.work_bytes_per_request)
    }

    pub fn shared_bytes(&self, batch: usize, seq: usize) -> u64 {
        self.backbone_bytes + batch as u64 * self.per_delta_bytes + self.activation_bytes(batch, seq)
    }

    pub fn naive_bytes(&self, batch: usize, seq: usize) -> u64 {
        batch as u64 * self.naive_per_model_bytes + self.activation_bytes(batch, seq)
    }

    /// Weight bytes one decode step reads.
    pub fn bytes_touched(&self, mode: DecodeMode, batch: usize) -> u64 {
        match mode {
            DecodeMode::Shared => self.backbone_bytes + batch as u64 * self.per_delta_bytes,
            DecodeMode::Naive => batch as u64 * self.naive_per_model_bytes,
        }
    }

    /// Smallest batch whose deltas together outweigh the backbone's
    /// projection matrices.
    pub fn crossover(&self) -> Option<u64> {
        (self.per_delta_bytes > 0).then(|| self.backbone_linear_bytes / self.per_delta_bytes + 1)
    }

    /// Arithmetic model of a named architecture at `origin` width. With
    /// `share_unquantized`, tenants reuse the backbone's embedding, LM head
    /// and norms and a delta is just its sign planes; otherwise those tensors
    /// count at origin width in every delta.
    pub fn for_shape(shape: &ArchShape, origin: OriginDtype, share_unquantized: bool) -> Self {
        let tensors = shape.tensors();
        let report = compression_report_for(&shape.name, &tensors, origin, 1);
        let width = origin.bytes_per_param() as u64;
        let linear: u64 = tensors.iter().filter(|t| t.quantized).map(|t| t.params() as u64 * width).sum();
        let unquantized = report.unquantized_params * width;
        let per_delta = if share_unquantized {
            report.delta_bytes - unquantized
        } else {
            report.delta_bytes
        };
        MemoryModel {
            backbone_bytes: report.base_bytes,
            backbone_linear_bytes: linear,
            per_delta_bytes: per_delta,
            naive_per_model_bytes: report.base_bytes,
            kv_bytes_per_token: (shape.n_layers * 2 * shape.kv_dim) as u64 * width,
            work_bytes_per_request: work_bytes(shape.hidden, shape.intermediate, shape.vocab, width),
        }
    }
}

fn work_bytes(dim: usize, intermediate: usize, vocab: usize, width: u64) -> u64 {
    (4 * dim + 2 * intermediate + vocab) as u64 * width
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MemoryReport {
    #[serde(flatten)]
    pub model: MemoryModel,
    pub batch: usize,
    pub seq: usize,
    pub activation_bytes: u64,
    pub shared_bytes: u64,
    pub naive_bytes: u64,
    pub ratio: f64,
    pub crossover: Option<u64>,
}

impl MemoryReport {
    pub fn new(model: MemoryModel, batch: usize, seq: usize) -> Self {
        let shared = model.shared_bytes(batch, seq);
        let naive = model.naive_bytes(batch, seq);
        MemoryReport {
            activation_bytes: model.activation_bytes(batch, seq),
            shared_bytes: shared,
            naive_bytes: naive,
            ratio: if naive == 0 { 0.0 } else { shared as f64 / naive as f64 },
            crossover: model.crossover(),
            batch,
            seq,
            model,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    #[serde(rename = "B")]
    pub batch: usize,
    pub mode: DecodeMode,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub bytes_touched: u64,
    pub resident_bytes: u64,
}

pub const BENCH_HEADER: &str = "B,mode,mean_ms,p50_ms,bytes_touched,resident_bytes";

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from(BENCH_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.4},{:.4},{},{}\n",
            r.batch, r.mode, r.mean_ms, r.p50_ms, r.bytes_touched, r.resident_bytes
        ));
    }
    out
}

struct Loaded {
    delta: DeltaFile,
    view: ModelView,
}

enum Slot {
    Resident(Loaded),
    Cold {
        path: PathBuf,
        loaded: Option<Loaded>,
        load_ms: Option<f64>,
    },
}

impl Slot {
    fn loaded(&self) -> Option<&Loaded> {
        match self {
            Slot::Resident(l) => Some(l),
            Slot::Cold { loaded, .. } => loaded.as_ref(),
        }
    }
}

struct CachedContext {
    tokens: Vec<u32>,
    cache: KvCache,
}

/// Exclusively owned by one driver.
pub struct ServingPool {
    backbone: BaseModel,
    registry: BTreeMap<String, Slot>,
    caches: HashMap<(u64, DecodeMode), CachedContext>,
    naive: HashMap<String, ModelView>,
    /// Keep materialized merged models between steps instead of evicting
    /// them after each step.
    pub retain_naive: bool,
    backbone_passes: u64,
    prefill_passes: u64,
}

impl ServingPool {
    pub fn new(backbone: BaseModel) -> Self {
        Self {
            backbone,
            registry: BTreeMap::new(),
            caches: HashMap::new(),
            naive: HashMap::new(),
            retain_naive: false,
            backbone_passes: 0,
            prefill_passes: 0,
        }
    }

    pub fn from_checkpoint(ckpt: &ModelCheckpoint) -> Result<Self> {
        Ok(Self::new(BaseModel::from_checkpoint(ckpt)?))
    }

    pub fn from_quantized(q: &QuantizedCheckpoint) -> Result<Self> {
        Ok(Self::new(q.base_model()?))
    }

    pub fn config(&self) -> &ToyArchConfig {
        &self.backbone.config
    }

    pub fn backbone_bytes(&self) -> u64 {
        self.backbone.tensors.values().map(|t| t.storage_bytes() as u64).sum()
    }

    fn backbone_linear_bytes(&self) -> u64 {
        self.backbone
            .tensors
            .iter()
            .filter(|(k, _)| is_block_linear(k))
            .map(|(_, t)| t.storage_bytes() as u64)
            .sum()
    }

    fn check_delta(&self, delta: &DeltaFile) -> Result<()> {
        for (name, t) in &self.backbone.tensors {
            let e = delta.entries.get(name).ok_or_else(|| Error::MissingTensor(name.clone()))?;
            if e.shape() != t.shape() {
                return Err(Error::ShapeMismatch {
                    name: name.clone(),
                    expected: t.shape(),
                    got: e.shape(),
                });
            }
        }
        if let Some(extra) = delta.entries.keys().find(|k| !self.backbone.tensors.contains_key(*k)) {
            return Err(Error::UnexpectedTensor(extra.clone()));
        }
        Ok(())
    }

    fn load(&self, delta: DeltaFile) -> Result<Loaded> {
        self.check_delta(&delta)?;
        let view = ModelView::decomposed(&self.backbone, &delta)?;
        Ok(Loaded { delta, view })
    }

    /// Registers an in-memory delta as resident.
    pub fn register(&mut self, id: &str, delta: DeltaFile) -> Result<()> {
        if self.registry.contains_key(id) {
            return Err(Error::DuplicateDelta(id.to_string()));
        }
        let loaded = self.load(delta)?;
        self.registry.insert(id.to_string(), Slot::Resident(loaded));
        Ok(())
    }

    /// Registers a `.bdelta` file. Cold deltas are validated now but only
    /// held in memory from their first use on.
    pub fn register_delta(&mut self, id: &str, path: &Path, resident: bool) -> Result<()> {
        if self.registry.contains_key(id) {
            return Err(Error::DuplicateDelta(id.to_string()));
        }
        let delta = DeltaFile::read(path)?;
        if resident {
            return self.register(id, delta);
        }
        self.check_delta(&delta)?;
        self.registry.insert(
            id.to_string(),
            Slot::Cold {
                path: path.to_path_buf(),
                loaded: None,
                load_ms: None,
            },
        );
        Ok(())
    }

    pub fn delta_ids(&self) -> Vec<String> {
        self.registry.keys().cloned().collect()
    }

    /// Time spent loading each cold delta on first use.
    pub fn load_times_ms(&self) -> BTreeMap<String, f64> {
        self.registry
            .iter()
            .filter_map(|(k, s)| match s {
                Slot::Cold { load_ms: Some(ms), .. } => Some((k.clone(), *ms)),
                _ => None,
            })
            .collect()
    }

    /// Bytes of resident weights: the backbone once plus every delta
    /// currently in memory.
    pub fn resident_bytes(&self) -> u64 {
        self.backbone_bytes()
            + self
                .registry
                .values()
                .filter_map(Slot::loaded)
                .map(|l| l.delta.storage_bytes() as u64)
                .sum::<u64>()
    }

    pub fn kv_cache_bytes(&self) -> u64 {
        self.caches.values().map(|c| c.cache.bytes() as u64).sum()
    }

    /// Backbone passes of full decode steps so far; shared mode adds one per
    /// step, naive mode one per request.
    pub fn backbone_passes(&self) -> u64 {
        self.backbone_passes
    }

    /// Extra passes spent catching a cache up to a longer context.
    pub fn prefill_passes(&self) -> u64 {
        self.prefill_passes
    }

    pub fn reset_caches(&mut self) {
        self.caches.clear();
    }

    fn ensure_loaded(&mut self, id: &str) -> Result<()> {
        let needs = match self.registry.get(id) {
            None => return Err(Error::UnknownDelta(id.to_string())),
            Some(Slot::Cold { loaded: None, path, .. }) => Some(path.clone()),
            Some(_) => None,
        };
        if let Some(path) = needs {
            let t = Instant::now();
            let loaded = self.load(DeltaFile::read(&path)?)?;
            let ms = t.elapsed().as_secs_f64() * 1e3;
            if let Some(Slot::Cold { loaded: l, load_ms, .. }) = self.registry.get_mut(id) {
                *l = Some(loaded);
                *load_ms = Some(ms);
            }
        }
        Ok(())
    }

    fn ensure_materialized(&mut self, id: &str) -> Result<()> {
        if self.naive.contains_key(id) {
            return Ok(());
        }
        let delta = &self.registry[id].loaded().expect("loaded before materializing").delta;
        let mut tensors = BTreeMap::new();
        for (name, w) in &self.backbone.tensors {
            let mut m = w.to_dense();
            if let Some(e) = delta.entries.get(name) {
                m.add_assign(&e.reconstruct())?;
            }
            tensors.insert(name.clone(), m);
        }
        let merged = ModelCheckpoint::new(tensors, Some(self.backbone.config))?;
        self.naive.insert(id.to_string(), ModelView::merged(&merged)?);
        Ok(())
    }

    /// Bytes of one merged model as naive serving holds it.
    pub fn naive_model_bytes(&self) -> u64 {
        self.backbone.tensors.values().map(|t| t.shape().0 as u64 * t.shape().1 as u64 * 4).sum()
    }

    pub fn memory_model(&self) -> MemoryModel {
        let cfg = self.backbone.config;
        let per_delta = self
            .registry
            .values()
            .filter_map(Slot::loaded)
            .map(|l| l.delta.storage_bytes() as u64)
            .max()
            .unwrap_or(0);
        MemoryModel {
            backbone_bytes: self.backbone_bytes(),
            backbone_linear_bytes: self.backbone_linear_bytes(),
            per_delta_bytes: per_delta,
            naive_per_model_bytes: self.naive_model_bytes(),
            kv_bytes_per_token: (cfg.n_layers * 2 * cfg.dim * 4) as u64,
            work_bytes_per_request: work_bytes(cfg.dim, cfg.intermediate, cfg.vocab, 4),
        }
    }

    pub fn memory_report(&self, batch: usize, seq: usize) -> MemoryReport {
        MemoryReport::new(self.memory_model(), batch, seq)
    }

    /// Next-token logits for every request.
    pub fn decode_step(&mut self, batch: &[DecodeRequest], mode: DecodeMode) -> Result<Vec<Vec<f32>>> {
        let max = self.backbone.config.max_seq;
        let mut seen = std::collections::HashSet::new();
        for r in batch {
            if !seen.insert(r.request_id) {
                return Err(Error::Invalid(format!("request {} appears twice in one batch", r.request_id)));
            }
            if r.context.is_empty() {
                return Err(Error::Invalid(format!("request {} has an empty context", r.request_id)));
            }
            if r.context.len() > max {
                return Err(Error::SequenceTooLong {
                    len: r.context.len(),
                    max,
                });
            }
            self.ensure_loaded(&r.delta_id)?;
            if mode == DecodeMode::Naive {
                self.ensure_materialized(&r.delta_id)?;
            }
        }

        // take each request's cache, dropping it if the context diverged
        let n_layers = self.backbone.config.n_layers;
        let mut ctx: Vec<CachedContext> = batch
            .iter()
            .map(|r| {
                let fresh = || CachedContext {
                    tokens: Vec::new(),
                    cache: KvCache::new(n_layers),
                };
                match self.caches.remove(&(r.request_id, mode)) {
                    Some(c) if c.tokens.len() < r.context.len() && r.context.starts_with(&c.tokens) => c,
                    _ => fresh(),
                }
            })
            .collect();

        let result = self.run_step(batch, mode, &mut ctx);
        for (r, c) in batch.iter().zip(ctx) {
            self.caches.insert((r.request_id, mode), c);
        }
        if !self.retain_naive {
            self.naive.clear();
        }
        result
    }

    fn run_step(&mut self, batch: &[DecodeRequest], mode: DecodeMode, ctx: &mut [CachedContext]) -> Result<Vec<Vec<f32>>> {
        let views: Vec<&ModelView> = batch
            .iter()
            .map(|r| match mode {
                DecodeMode::Shared => &self.registry[&r.delta_id].loaded().expect("loaded").view,
                DecodeMode::Naive => &self.naive[&r.delta_id],
            })
            .collect();
        let mut out = vec![Vec::new(); batch.len()];
        let mut passes = 0u64;
        let mut prefill = 0u64;
        {
            // group of request indices that advance together
            let mut step = |idx: &[usize], ctx: &mut [CachedContext], last: bool| -> Result<()> {
                let mut vs = Vec::with_capacity(idx.len());
                let mut toks = Vec::with_capacity(idx.len());
                let mut caches: Vec<&mut KvCache> = Vec::with_capacity(idx.len());
                let pos: Vec<usize> = idx.iter().map(|&i| ctx[i].tokens.len()).collect();
                for (&i, &p) in idx.iter().zip(&pos) {
                    vs.push(views[i]);
                    toks.push(batch[i].context[p]);
                }
                let mut picked: Vec<Option<&mut CachedContext>> = ctx.iter_mut().map(Some).collect();
                let mut chosen: Vec<&mut CachedContext> = idx.iter().map(|&i| picked[i].take().expect("distinct")).collect();
                for c in chosen.iter_mut() {
                    caches.push(&mut c.cache);
                }
                let logits = decode_batch(&vs, &mut caches, &toks)?;
                for (c, &t) in chosen.iter_mut().zip(&toks) {
                    c.tokens.push(t);
                }
                if last {
                    for (&i, l) in idx.iter().zip(logits) {
                        out[i] = l;
                    }
                    passes += 1;
                } else {
                    prefill += 1;
                }
                Ok(())
            };
            match mode {
                DecodeMode::Shared => {
                    loop {
                        let pending: Vec<usize> = (0..batch.len())
                            .filter(|&i| ctx[i].tokens.len() + 1 < batch[i].context.len())
                            .collect();
                        if pending.is_empty() {
                            break;
                        }
                        step(&pending, ctx, false)?;
                    }
                    let all: Vec<usize> = (0..batch.len()).collect();
                    step(&all, ctx, true)?;
                }
                DecodeMode::Naive => {
                    for i in 0..batch.len() {
                        while ctx[i].tokens.len() + 1 < batch[i].context.len() {
                            step(&[i], ctx, false)?;
                        }
                        step(&[i], ctx, true)?;
                    }
                }
            }
        }
        self.backbone_passes += passes;
        self.prefill_passes += prefill;
        Ok(out)
    }

    /// Wall-clock time of one decode step per mode and batch size. Each
    /// trial decodes the token at position `seq − 1` after an untimed
    /// prefill of the preceding context; merged models for naive mode are
    /// built before timing starts.
    pub fn latency_bench(
        &mut self,
        batch_sizes: &[usize],
        modes: &[DecodeMode],
        seq: usize,
        trials: usize,
        warmup: usize,
        seed: u64,
    ) -> Result<Vec<BenchRow>> {
        if trials < 3 {
            return Err(Error::Invalid("benchmark needs at least three trials".into()));
        }
        let ids = self.delta_ids();
        if ids.is_empty() {
            return Err(Error::Invalid("no deltas registered".into()));
        }
        let cfg = self.backbone.config;
        if seq == 0 || seq > cfg.max_seq {
            return Err(Error::SequenceTooLong { len: seq, max: cfg.max_seq });
        }
        let retain = self.retain_naive;
        self.retain_naive = true;
        let mut rows = Vec::new();
        let result = (|| {
            for &b in batch_sizes {
                let requests: Vec<DecodeRequest> = (0..b)
                    .map(|i| DecodeRequest {
                        request_id: i as u64,
                        delta_id: ids[i % ids.len()].clone(),
                        context: random_tokens(cfg.vocab, seq, seed.wrapping_add(i as u64)),
                    })
                    .collect();
                let prefix: Vec<DecodeRequest> = requests
                    .iter()
                    .map(|r| DecodeRequest {
                        context: r.context[..seq - 1].to_vec(),
                        ..r.clone()
                    })
                    .collect();
                for &mode in modes {
                    let mut times = Vec::with_capacity(trials);
                    for trial in 0..warmup + trials {
                        self.reset_caches();
                        if seq > 1 {
                            self.decode_step(&prefix, mode)?;
                        }
                        let t = Instant::now();
                        self.decode_step(&requests, mode)?;
                        let ms = t.elapsed().as_secs_f64() * 1e3;
                        if trial >= warmup {
                            times.push(ms);
                        }
                    }
                    let model = self.memory_model();
                    let resident = match mode {
                        DecodeMode::Shared => self.resident_bytes(),
                        DecodeMode::Naive => b as u64 * model.naive_per_model_bytes,
                    };
                    rows.push(BenchRow {
                        batch: b,
                        mode,
                        mean_ms: times.iter().sum::<f64>() / times.len() as f64,
                        p50_ms: median(&mut times),
                        bytes_touched: model.bytes_touched(mode, b),
                        resident_bytes: resident,
                    });
                }
            }
            Ok(())
        })();
        self.retain_naive = retain;
        if !retain {
            self.naive.clear();
        }
        self.reset_caches();
        result.map(|_| rows)
    }
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

/// Dense copy of every backbone tensor; handy for oracles.
pub fn backbone_dense(base: &BaseModel) -> BTreeMap<String, DenseMatrix> {
    base.tensors.iter().map(|(k, w)| (k.clone(), BaseWeight::to_dense(w))).collect()
}
