use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use signdelta::checkpoint::{OriginDtype, SafetensorsFile};
use signdelta::config::ToyArchConfig;
use signdelta::delta_file::{DeltaFile, MAGIC};
use signdelta::distill::{byte_tokenize, distill_lowrank, distill_scales, load_tokens, write_token_file, DistillConfig};
use signdelta::eval::evaluate;
use signdelta::lowrank::{cev, LowRankFile, RankChoice, RankConvention};
use signdelta::model::{BaseModel, ModelView};
use signdelta::quant::{quantize_checkpoint, scales_sidecar_path, QuantizedCheckpoint};
use signdelta::serve::{bench_csv, DecodeMode, MemoryModel, MemoryReport, ServingPool};
use signdelta::size::{compression_report_for, ArchShape, PRESET_NAMES};
use signdelta::synth::{perturb, random_checkpoint, Perturbation};
use signdelta::{apply_delta, build_delta_file, load_checkpoint, save_checkpoint, Error, ModelCheckpoint, QuantPolicy};

use crate::manifest::{read_manifest, sha256_file, Recorder};

#[derive(Debug, Parser)]
#[command(name = "signdelta", version, about = "1-bit weight deltas: compress, distill, evaluate and serve")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Binarize fine − base into a .bdelta file.
    Compress(CompressArgs),
    /// Refine delta scales (or low-rank factors) against the fine model's logits.
    Distill(DistillArgs),
    /// Write base + delta as a full checkpoint.
    Apply(ApplyArgs),
    /// Compare base + delta with the fine model on calibration windows.
    Eval(EvalArgs),
    /// Truncated-SVD delta baseline.
    Svd(SvdArgs),
    /// Cumulative explained variance of one tensor's delta.
    Cev(CevArgs),
    /// INT8 round-to-nearest quantization of a checkpoint.
    Quantize(QuantizeArgs),
    /// Decode latency and memory for many deltas over one backbone.
    Bench(BenchArgs),
    /// Compression factor from layer shapes alone.
    Size(SizeArgs),
    /// Random base checkpoint and a perturbed fine-tune of it.
    Synth(SynthArgs),
    /// Byte-level token ids of a text file.
    Tokenize(TokenizeArgs),
    /// Re-run the command recorded in a manifest and compare output hashes.
    Replay(ReplayArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct CompressArgs {
    #[arg(long)]
    base: PathBuf,
    #[arg(long)]
    fine: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Sign planes per quantized tensor.
    #[arg(long, default_value_t = 1)]
    bits: usize,
    /// block-linear, none, all-matrices or names:a,b,...
    #[arg(long, default_value = "block-linear")]
    policy: String,
}

#[derive(Debug, Args, Serialize)]
pub struct CalibArgs {
    /// Token file of little-endian u32 ids.
    #[arg(long)]
    calib: PathBuf,
    #[arg(long, default_value_t = 128)]
    seq: usize,
    /// Calibration windows to draw; defaults to steps × batch for distill
    /// and 32 for eval.
    #[arg(long)]
    windows: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct DistillArgs {
    #[arg(long)]
    base: PathBuf,
    #[arg(long)]
    fine: PathBuf,
    /// A .bdelta file, or a low-rank delta written by `svd`.
    #[arg(long)]
    delta: PathBuf,
    #[command(flatten)]
    calib: CalibArgs,
    #[arg(long, default_value_t = 200)]
    steps: usize,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long)]
    out: PathBuf,
    /// JSON report; defaults to `<out>.report.json`.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct ApplyArgs {
    /// Dense or INT8 base checkpoint.
    #[arg(long)]
    base: PathBuf,
    #[arg(long)]
    delta: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    base: PathBuf,
    /// Omit to evaluate the bare base model.
    #[arg(long)]
    delta: Option<PathBuf>,
    #[arg(long)]
    fine: PathBuf,
    #[command(flatten)]
    calib: CalibArgs,
    /// Metrics JSON; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct SvdArgs {
    #[arg(long)]
    base: PathBuf,
    #[arg(long)]
    fine: PathBuf,
    /// An integer, `full`, `equiv` (memory of a 1-bit delta with f32
    /// factors) or `equiv-f16`.
    #[arg(long)]
    rank: String,
    #[arg(long, default_value = "block-linear")]
    policy: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct CevArgs {
    #[arg(long)]
    base: PathBuf,
    #[arg(long)]
    fine: PathBuf,
    #[arg(long)]
    tensor: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct QuantizeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value = "block-linear")]
    policy: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeArg {
    Shared,
    Naive,
    Both,
}

#[derive(Debug, Args, Serialize)]
pub struct BenchArgs {
    /// Dense or INT8 backbone checkpoint.
    #[arg(long)]
    base: PathBuf,
    /// `id=path` for each delta to register.
    #[arg(long, num_args = 1.., required = true)]
    deltas: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16")]
    batch_list: Vec<usize>,
    #[arg(long, default_value_t = 16)]
    seq: usize,
    #[arg(long, value_enum, default_value_t = ModeArg::Both)]
    mode: ModeArg,
    #[arg(long, default_value_t = 5)]
    trials: usize,
    #[arg(long, default_value_t = 1)]
    warmup: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Register these ids cold: validated now, loaded on first use.
    #[arg(long, num_args = 1..)]
    cold: Vec<String>,
    #[arg(long)]
    out: PathBuf,
    /// Memory report JSON; defaults to `<out>.memory.json`.
    #[arg(long)]
    memory_out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum OriginArg {
    F16,
    F32,
}

impl From<OriginArg> for OriginDtype {
    fn from(o: OriginArg) -> Self {
        match o {
            OriginArg::F16 => OriginDtype::F16,
            OriginArg::F32 => OriginDtype::F32,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct SizeArgs {
    /// llama2-7b, llama2-13b, llama2-70b or mistral-7b; all four when
    /// neither this nor --config is given.
    #[arg(long, num_args = 1..)]
    preset: Vec<String>,
    /// ToyArchConfig JSON.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = OriginArg::F16)]
    origin: OriginArg,
    #[arg(long, default_value_t = 1)]
    bits: usize,
    /// Also print the serving memory model at this batch size.
    #[arg(long)]
    serving_batch: Option<usize>,
    #[arg(long, default_value_t = 128)]
    serving_seq: usize,
    /// Emit JSON instead of a table.
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    /// ToyArchConfig JSON; the default desk-scale config when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// `sigma <σ>` for Gaussian noise or `signed <c>` for ±c.
    #[arg(long, num_args = 2, value_names = ["KIND", "VALUE"])]
    perturb: Vec<String>,
    #[arg(long, default_value = "block-linear")]
    policy: String,
    #[arg(long)]
    out_base: PathBuf,
    #[arg(long)]
    out_fine: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct TokenizeArgs {
    #[arg(long)]
    input: PathBuf,
    /// Fold byte ids into a smaller vocabulary (id mod vocab).
    #[arg(long, default_value_t = 256)]
    vocab: u32,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ReplayArgs {
    manifest: PathBuf,
}

fn bad(msg: impl Into<String>) -> anyhow::Error {
    Error::Invalid(msg.into()).into()
}

pub fn run(cli: Cli, argv: &[String]) -> Result<()> {
    match cli.command {
        Command::Compress(a) => compress(a, argv),
        Command::Distill(a) => distill(a, argv),
        Command::Apply(a) => apply(a, argv),
        Command::Eval(a) => eval(a, argv),
        Command::Svd(a) => svd(a, argv),
        Command::Cev(a) => cev_cmd(a, argv),
        Command::Quantize(a) => quantize(a, argv),
        Command::Bench(a) => bench(a, argv),
        Command::Size(a) => size(a),
        Command::Synth(a) => synth(a, argv),
        Command::Tokenize(a) => tokenize(a, argv),
        Command::Replay(a) => replay(a),
    }
}

/// A backbone as stored on disk: plain `f32` or INT8 codes with a sidecar.
enum Backbone {
    Dense(ModelCheckpoint),
    Int8(QuantizedCheckpoint),
}

impl Backbone {
    fn load(path: &Path, rec: &mut Recorder) -> Result<Self> {
        rec.input(path)?;
        let file = SafetensorsFile::read(path)?;
        if file.metadata.get("format").map(String::as_str) == Some("rtn-int8") {
            rec.input(&scales_sidecar_path(path))?;
            Ok(Backbone::Int8(QuantizedCheckpoint::load(path)?))
        } else {
            Ok(Backbone::Dense(ModelCheckpoint::from_safetensors(&file)?))
        }
    }

    fn dense(&self) -> ModelCheckpoint {
        match self {
            Backbone::Dense(c) => c.clone(),
            Backbone::Int8(q) => q.dequantize(),
        }
    }

    fn base_model(&self) -> Result<BaseModel> {
        Ok(match self {
            Backbone::Dense(c) => BaseModel::from_checkpoint(c)?,
            Backbone::Int8(q) => q.base_model()?,
        })
    }
}

enum AnyDelta {
    Signs(DeltaFile),
    LowRank(LowRankFile),
}

impl AnyDelta {
    fn load(path: &Path, rec: &mut Recorder) -> Result<Self> {
        rec.input(path)?;
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.starts_with(MAGIC) {
            Ok(AnyDelta::Signs(DeltaFile::parse(&bytes)?))
        } else {
            Ok(AnyDelta::LowRank(LowRankFile::from_safetensors(&SafetensorsFile::parse(&bytes)?)?))
        }
    }

    fn apply(&self, base: &ModelCheckpoint) -> Result<ModelCheckpoint> {
        Ok(match self {
            AnyDelta::Signs(d) => apply_delta(base, d)?,
            AnyDelta::LowRank(l) => l.apply(base)?,
        })
    }
}

fn load_ckpt(path: &Path, rec: &mut Recorder) -> Result<ModelCheckpoint> {
    rec.input(path)?;
    Ok(load_checkpoint(path)?)
}

fn config_of(ckpt: &ModelCheckpoint) -> Result<ToyArchConfig> {
    Ok(*ckpt.config()?)
}

fn read_config(path: &Path) -> Result<ToyArchConfig> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let cfg: ToyArchConfig = serde_json::from_slice(&bytes)
        .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let json = serde_json::to_vec_pretty(value)?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

#[derive(Serialize)]
struct CompressSummary {
    tensors: usize,
    quantized: usize,
    planes: usize,
    base_bytes: u64,
    delta_bytes: u64,
    factor: f64,
    zero_scales: usize,
}

fn compress(a: CompressArgs, argv: &[String]) -> Result<()> {
    let mut rec = Recorder::new("compress", argv, &a, None);
    let policy = QuantPolicy::parse(&a.policy)?;
    let base = load_ckpt(&a.base, &mut rec)?;
    let fine = load_ckpt(&a.fine, &mut rec)?;
    let delta = build_delta_file(&base, &fine, a.bits, &policy)?;
    delta.write(&a.out)?;
    rec.output(&a.out, false)?;
    rec.finish(&a.out)?;
    let base_bytes = base.payload_bytes() as u64;
    let delta_bytes = delta.storage_bytes() as u64;
    let summary = CompressSummary {
        tensors: delta.entries.len(),
        quantized: delta.quantized_names().len(),
        planes: a.bits,
        base_bytes,
        delta_bytes,
        factor: base_bytes as f64 / delta_bytes.max(1) as f64,
        zero_scales: delta.scales().iter().filter(|s| s.2 == 0.0).count(),
    };
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn distill(a: DistillArgs, argv: &[String]) -> Result<()> {
    let mut rec = Recorder::new("distill", argv, &a, Some(a.calib.seed));
    let base = load_ckpt(&a.base, &mut rec)?;
    let fine = load_ckpt(&a.fine, &mut rec)?;
    let delta = AnyDelta::load(&a.delta, &mut rec)?;
    rec.input(&a.calib.calib)?;
    let cfg = DistillConfig {
        steps: a.steps,
        batch: a.batch,
        seq_len: a.calib.seq,
        lr: a.lr,
        seed: a.calib.seed,
        ..DistillConfig::default()
    };
    let windows = a.calib.windows.unwrap_or(a.steps * a.batch);
    let calib = load_tokens(&a.calib.calib, a.calib.seq, windows, a.calib.seed, config_of(&base)?.vocab)?;
    if calib.wrapped {
        eprintln!(
            "warning: {} windows requested, token file holds {}; window order repeats",
            windows, calib.capacity
        );
    }
    let report = match &delta {
        AnyDelta::Signs(d) => {
            let (out, report) = distill_scales(&base, &fine, d, &calib, &cfg)?;
            out.write(&a.out)?;
            report
        }
        AnyDelta::LowRank(l) => {
            let (out, report) = distill_lowrank(&base, &fine, l, &calib, &cfg)?;
            out.write(&a.out)?;
            report
        }
    };
    let report_path = a.report.clone().unwrap_or_else(|| sibling(&a.out, ".report.json"));
    write_json(&report_path, &report)?;
    rec.output(&a.out, false)?;
    rec.output(&report_path, false)?;
    rec.finish(&a.out)?;
    println!(
        "initial_loss {:.6e}  final_loss {:.6e}  steps {}",
        report.initial_loss, report.final_loss, report.steps
    );
    Ok(())
}

fn apply(a: ApplyArgs, argv: &[String]) -> Result<()> {
    let mut rec = Recorder::new("apply", argv, &a, None);
    let base = Backbone::load(&a.base, &mut rec)?.dense();
    let delta = AnyDelta::load(&a.delta, &mut rec)?;
    let merged = delta.apply(&base)?;
    save_checkpoint(&merged, &a.out)?;
    rec.output(&a.out, false)?;
    rec.finish(&a.out)?;
    Ok(())
}

fn eval(a: EvalArgs, argv: &[String]) -> Result<()> {
    let mut rec = Recorder::new("eval", argv, &a, Some(a.calib.seed));
    let backbone = Backbone::load(&a.base, &mut rec)?;
    let fine = load_ckpt(&a.fine, &mut rec)?;
    let delta = a.delta.as_deref().map(|p| AnyDelta::load(p, &mut rec)).transpose()?;
    rec.input(&a.calib.calib)?;
    let cfg = config_of(&fine)?;
    let windows = a.calib.windows.unwrap_or(32);
    let calib = load_tokens(&a.calib.calib, a.calib.seq, windows, a.calib.seed, cfg.vocab)?;

    let dense_base = backbone.dense();
    let student_weights = match &delta {
        Some(d) => d.apply(&dense_base)?,
        None => dense_base,
    };
    // INT8 bases run decomposed so the codes are read directly
    let student = match (&backbone, &delta) {
        (Backbone::Int8(_), Some(AnyDelta::Signs(d))) => ModelView::decomposed(&backbone.base_model()?, d)?,
        _ => ModelView::merged(&student_weights)?,
    };
    let teacher = ModelView::merged(&fine)?;
    let report = evaluate(&student, &teacher, &student_weights.tensors, &fine, &calib.sequences)?;
    match &a.out {
        Some(path) => {
            write_json(path, &report)?;
            rec.output(path, false)?;
            rec.finish(path)?;
        }
        None => println!("{}", serde_json::to_string_pretty(&report)?),
    }
    Ok(())
}

fn parse_rank(s: &str) -> Result<RankChoice> {
    Ok(match s {
        "full" => RankChoice::Full,
        "equiv" => RankChoice::MemoryEquivalent(RankConvention::F32Factors),
        "equiv-f16" => RankChoice::MemoryEquivalent(RankConvention::F16Factors),
        n => RankChoice::Fixed(
            n.parse()
                .map_err(|_| bad(format!("rank `{n}`: expected an integer, full, equiv or equiv-f16")))?,
        ),
    })
}

fn svd(a: SvdArgs, argv: &[String]) -> Result<()> {
    let mut rec = Recorder::new("svd", argv, &a, None);
    let rank = parse_rank(&a.rank)?;
    let policy = QuantPolicy::parse(&a.policy)?;
    let base = load_ckpt(&a.base, &mut rec)?;
    let fine = load_ckpt(&a.fine, &mut rec)?;
    let lr = LowRankFile::build(&base, &fine, rank, &policy)?;
    lr.write(&a.out)?;
    rec.output(&a.out, false)?;
    rec.finish(&a.out)?;
    Ok(())
}

fn cev_cmd(a: CevArgs, argv: &[String]) -> Result<()> {
    let mut rec = Recorder::new("cev", argv, &a, None);
    let base = load_ckpt(&a.base, &mut rec)?;
    let fine = load_ckpt(&a.fine, &mut rec)?;
    base.check_compatible(&fine)?;
    let c = cev(base.tensor(&a.tensor)?, fine.tensor(&a.tensor)?)?;
    if c.degenerate {
        eprintln!("warning: delta of `{}` is identically zero", a.tensor);
    }
    std::fs::write(&a.out, c.to_csv()).map_err(|e| Error::io(&a.out, e))?;
    rec.output(&a.out, false)?;
    rec.finish(&a.out)?;
    Ok(())
}

fn quantize(a: QuantizeArgs, argv: &[String]) -> Result<()> {
    let mut rec = Recorder::new("quantize", argv, &a, None);
    let policy = QuantPolicy::parse(&a.policy)?;
    let model = load_ckpt(&a.model, &mut rec)?;
    let q = quantize_checkpoint(&model, &policy);
    q.save(&a.out)?;
    rec.output(&a.out, false)?;
    rec.output(&scales_sidecar_path(&a.out), false)?;
    rec.finish(&a.out)?;
    println!(
        "{} tensors quantized per row, {} bytes (from {})",
        q.quantized.len(),
        q.storage_bytes(),
        model.payload_bytes()
    );
    Ok(())
}

#[derive(Serialize)]
struct BenchMemory {
    #[serde(flatten)]
    report: MemoryReport,
    load_times_ms: BTreeMap<String, f64>,
    threads: usize,
}

fn bench(a: BenchArgs, argv: &[String]) -> Result<()> {
    let mut rec = Recorder::new("bench", argv, &a, Some(a.seed));
    if a.batch_list.is_empty() || a.batch_list.contains(&0) {
        return Err(bad("--batch-list needs positive batch sizes"));
    }
    let mut pool = ServingPool::new(Backbone::load(&a.base, &mut rec)?.base_model()?);
    for entry in &a.deltas {
        let (id, path) = entry
            .split_once('=')
            .ok_or_else(|| bad(format!("--deltas entry `{entry}` is not id=path")))?;
        let path = Path::new(path);
        rec.input(path)?;
        pool.register_delta(id, path, !a.cold.iter().any(|c| c == id))?;
    }
    if let Some(c) = a.cold.iter().find(|c| !pool.delta_ids().contains(c)) {
        return Err(Error::UnknownDelta(c.clone()).into());
    }
    let modes = match a.mode {
        ModeArg::Shared => vec![DecodeMode::Shared],
        ModeArg::Naive => vec![DecodeMode::Naive],
        ModeArg::Both => vec![DecodeMode::Shared, DecodeMode::Naive],
    };
    let rows = pool.latency_bench(&a.batch_list, &modes, a.seq, a.trials, a.warmup, a.seed)?;
    std::fs::write(&a.out, bench_csv(&rows)).map_err(|e| Error::io(&a.out, e))?;
    let batch = *a.batch_list.iter().max().expect("non-empty");
    let memory = BenchMemory {
        report: pool.memory_report(batch, a.seq),
        load_times_ms: pool.load_times_ms(),
        threads: rayon::current_num_threads(),
    };
    let memory_path = a.memory_out.clone().unwrap_or_else(|| sibling(&a.out, ".memory.json"));
    write_json(&memory_path, &memory)?;
    rec.output(&a.out, true)?;
    rec.output(&memory_path, true)?;
    rec.finish(&a.out)?;
    print!("{}", bench_csv(&rows));
    Ok(())
}

#[derive(Serialize)]
struct SizeRow {
    name: String,
    base_bytes: u64,
    delta_bytes: u64,
    factor: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    serving: Option<ServingMemory>,
}

/// Tenants that share the backbone's embedding, head and norms, next to
/// tenants that each carry their own copy.
#[derive(Serialize)]
struct ServingMemory {
    shared_unquantized: MemoryReport,
    full_delta: MemoryReport,
}

fn size(a: SizeArgs) -> Result<()> {
    let origin: OriginDtype = a.origin.into();
    let shapes = match &a.config {
        Some(path) => vec![ArchShape::from_config(&path.display().to_string(), &read_config(path)?)],
        None if a.preset.is_empty() => PRESET_NAMES.iter().map(|p| ArchShape::preset(p)).collect::<signdelta::Result<_>>()?,
        None => a.preset.iter().map(|p| ArchShape::preset(p)).collect::<signdelta::Result<_>>()?,
    };
    if a.bits == 0 {
        return Err(Error::ZeroPlanes.into());
    }
    let rows: Vec<SizeRow> = shapes
        .iter()
        .map(|s| {
            let r = compression_report_for(&s.name, &s.tensors(), origin, a.bits);
            let serving = a.serving_batch.map(|b| ServingMemory {
                shared_unquantized: MemoryReport::new(MemoryModel::for_shape(s, origin, true), b, a.serving_seq),
                full_delta: MemoryReport::new(MemoryModel::for_shape(s, origin, false), b, a.serving_seq),
            });
            SizeRow {
                name: r.name,
                base_bytes: r.base_bytes,
                delta_bytes: r.delta_bytes,
                factor: r.factor,
                serving,
            }
        })
        .collect();
    if a.json {
        println!("{}", serde_json::to_string_pretty(&rows)?);
        return Ok(());
    }
    println!("{:<14} {:>16} {:>14} {:>8}", "model", "base_bytes", "delta_bytes", "factor");
    for r in &rows {
        println!("{:<14} {:>16} {:>14} {:>8.2}", r.name, r.base_bytes, r.delta_bytes, r.factor);
        if let Some(s) = &r.serving {
            println!(
                "  B={} shared/naive memory {:.3} (own embed/head per delta: {:.3}), crossover B*={}",
                s.shared_unquantized.batch,
                s.shared_unquantized.ratio,
                s.full_delta.ratio,
                s.shared_unquantized.crossover.map_or("-".into(), |c| c.to_string()),
            );
        }
    }
    Ok(())
}

fn synth(a: SynthArgs, argv: &[String]) -> Result<()> {
    let mut rec = Recorder::new("synth", argv, &a, Some(a.seed));
    let cfg = match &a.config {
        Some(path) => {
            rec.input(path)?;
            read_config(path)?
        }
        None => ToyArchConfig::default(),
    };
    let policy = QuantPolicy::parse(&a.policy)?;
    let how = match a.perturb.as_slice() {
        [] => Perturbation::Gaussian(0.01),
        [kind, value] => {
            let v: f32 = value
                .parse()
                .map_err(|_| bad(format!("--perturb value `{value}` is not a number")))?;
            match kind.as_str() {
                "sigma" => Perturbation::Gaussian(v),
                "signed" => Perturbation::Signed(v),
                other => return Err(bad(format!("--perturb kind `{other}`: expected sigma or signed"))),
            }
        }
        _ => unreachable!("clap takes exactly two values"),
    };
    let base = random_checkpoint(&cfg, a.seed)?;
    let fine = perturb(&base, how, &policy, a.seed.wrapping_add(1))?;
    save_checkpoint(&base, &a.out_base)?;
    save_checkpoint(&fine, &a.out_fine)?;
    rec.output(&a.out_base, false)?;
    rec.output(&a.out_fine, false)?;
    rec.finish(&a.out_fine)?;
    Ok(())
}

fn tokenize(a: TokenizeArgs, argv: &[String]) -> Result<()> {
    let mut rec = Recorder::new("tokenize", argv, &a, None);
    rec.input(&a.input)?;
    let text = std::fs::read(&a.input).map_err(|e| Error::io(&a.input, e))?;
    if a.vocab == 0 {
        return Err(bad("--vocab must be positive"));
    }
    let tokens: Vec<u32> = byte_tokenize(&text).into_iter().map(|t| t % a.vocab).collect();
    write_token_file(&a.out, &tokens)?;
    rec.output(&a.out, false)?;
    rec.finish(&a.out)?;
    println!("{} tokens", tokens.len());
    Ok(())
}

fn replay(a: ReplayArgs) -> Result<()> {
    let m = read_manifest(&a.manifest)?;
    if m.command == "replay" {
        return Err(bad("refusing to replay a replay"));
    }
    let cli = Cli::try_parse_from(std::iter::once("signdelta".to_string()).chain(m.argv.iter().cloned()))
        .map_err(|e| bad(format!("manifest argv no longer parses: {e}")))?;
    for (path, want) in &m.inputs {
        if sha256_file(path)? != *want {
            return Err(bad(format!("input {} changed since the recorded run", path.display())));
        }
    }
    run(cli, &m.argv)?;
    let mut mismatched = Vec::new();
    for (path, out) in &m.outputs {
        let got = sha256_file(path)?;
        let status = match (got == out.sha256, out.volatile) {
            (true, _) => "match",
            (false, true) => "differs (timing)",
            (false, false) => {
                mismatched.push(path.display().to_string());
                "MISMATCH"
            }
        };
        println!("{status:<16} {}", path.display());
    }
    if !mismatched.is_empty() {
        anyhow::bail!("replay produced different outputs: {}", mismatched.join(", "));
    }
    Ok(())
}
