use signdelta::config::ToyArchConfig;
use signdelta::delta_file::{build_delta_file, DeltaFile, QuantPolicy};
use signdelta::model::{BaseModel, ModelView};
use signdelta::quant::quantize_checkpoint;
use signdelta::serve::{bench_csv, DecodeMode, DecodeRequest, ServingPool, BENCH_HEADER};
use signdelta::synth::{perturb, random_checkpoint, random_tokens, Perturbation};
use signdelta::tensor::relative_error;
use signdelta::{Error, ModelCheckpoint};

fn small() -> ToyArchConfig {
    ToyArchConfig {
        vocab: 40,
        dim: 32,
        n_layers: 2,
        n_heads: 4,
        intermediate: 48,
        max_seq: 16,
        rope_theta: 10000.0,
    }
}

struct Fixture {
    base: ModelCheckpoint,
    deltas: Vec<DeltaFile>,
}

fn fixture(n: usize, seed: u64) -> Fixture {
    let base = random_checkpoint(&small(), seed).unwrap();
    let deltas = (0..n)
        .map(|i| {
            let fine = perturb(&base, Perturbation::Gaussian(0.02), &QuantPolicy::BlockLinear, seed + 1 + i as u64).unwrap();
            build_delta_file(&base, &fine, 1, &QuantPolicy::BlockLinear).unwrap()
        })
        .collect();
    Fixture { base, deltas }
}

fn pool(f: &Fixture) -> ServingPool {
    let mut p = ServingPool::from_checkpoint(&f.base).unwrap();
    for (i, d) in f.deltas.iter().enumerate() {
        p.register(&format!("d{i}"), d.clone()).unwrap();
    }
    p
}

fn requests(ids: &[usize], len: usize, seed: u64) -> Vec<DecodeRequest> {
    ids.iter()
        .enumerate()
        .map(|(r, &d)| DecodeRequest {
            request_id: r as u64,
            delta_id: format!("d{d}"),
            context: random_tokens(40, len, seed + r as u64),
        })
        .collect()
}

#[test]
fn shared_and_naive_agree() {
    let f = fixture(4, 1);
    for (b, seed) in [(1, 10), (3, 20), (8, 30)] {
        let mut p = pool(&f);
        let ids: Vec<usize> = (0..b).map(|i| i % 4).collect();
        let reqs = requests(&ids, 9, seed);
        let shared = p.decode_step(&reqs, DecodeMode::Shared).unwrap();
        let naive = p.decode_step(&reqs, DecodeMode::Naive).unwrap();
        for (s, n) in shared.iter().zip(&naive) {
            let err = relative_error(s, n);
            assert!(err < 1e-4, "B={b}: {err}");
        }
    }
}

#[test]
fn shared_matches_full_forward_of_applied_model() {
    let f = fixture(2, 2);
    let mut p = pool(&f);
    let reqs = requests(&[0, 1], 7, 40);
    let out = p.decode_step(&reqs, DecodeMode::Shared).unwrap();
    for (r, o) in reqs.iter().zip(&out) {
        let d = &f.deltas[r.delta_id[1..].parse::<usize>().unwrap()];
        let applied = signdelta::delta_file::apply_delta(&f.base, d).unwrap();
        let full = signdelta::model::forward(&ModelView::merged(&applied).unwrap(), &r.context).unwrap();
        assert!(relative_error(o, full.row(6)) < 1e-4);
    }
}

#[test]
fn incremental_steps_reuse_caches() {
    let f = fixture(2, 3);
    let mut p = pool(&f);
    let mut reqs = requests(&[0, 1], 5, 50);
    p.decode_step(&reqs, DecodeMode::Shared).unwrap();
    for r in reqs.iter_mut() {
        r.context.push(3);
    }
    let stepped = p.decode_step(&reqs, DecodeMode::Shared).unwrap();
    let prefills = p.prefill_passes();
    let mut fresh = pool(&f);
    let direct = fresh.decode_step(&reqs, DecodeMode::Shared).unwrap();
    for (a, b) in stepped.iter().zip(&direct) {
        assert!(relative_error(a, b) < 1e-5);
    }
    // the second step only decoded the one new token
    assert_eq!(prefills, 4);
    assert_eq!(fresh.prefill_passes(), 5);
}

#[test]
fn one_backbone_pass_per_shared_step() {
    let f = fixture(4, 4);
    for b in [1, 2, 5, 16] {
        let mut p = pool(&f);
        let ids: Vec<usize> = (0..b).map(|i| i % 4).collect();
        p.decode_step(&requests(&ids, 4, 60), DecodeMode::Shared).unwrap();
        assert_eq!(p.backbone_passes(), 1, "B={b}");
        p.decode_step(&requests(&ids, 4, 60), DecodeMode::Naive).unwrap();
        assert_eq!(p.backbone_passes(), 1 + b as u64);
    }
}

#[test]
fn permuting_requests_permutes_outputs() {
    let f = fixture(4, 5);
    let reqs = requests(&[0, 1, 2, 3, 1], 6, 70);
    let out = pool(&f).decode_step(&reqs, DecodeMode::Shared).unwrap();
    let order = [3, 0, 4, 2, 1];
    let permuted: Vec<DecodeRequest> = order.iter().map(|&i| reqs[i].clone()).collect();
    let out2 = pool(&f).decode_step(&permuted, DecodeMode::Shared).unwrap();
    for (k, &i) in order.iter().enumerate() {
        assert_eq!(out2[k], out[i]);
    }
}

#[test]
fn same_delta_same_context_same_logits() {
    let f = fixture(1, 6);
    let ctx = random_tokens(40, 8, 80);
    let reqs: Vec<DecodeRequest> = (0..4)
        .map(|i| DecodeRequest {
            request_id: i,
            delta_id: "d0".into(),
            context: ctx.clone(),
        })
        .collect();
    let out = pool(&f).decode_step(&reqs, DecodeMode::Shared).unwrap();
    assert!(out.iter().all(|o| o == &out[0]));
}

#[test]
fn identity_delta_decodes_like_backbone() {
    let f = fixture(0, 7);
    let mut p = ServingPool::from_checkpoint(&f.base).unwrap();
    p.register("id", build_delta_file(&f.base, &f.base, 1, &QuantPolicy::BlockLinear).unwrap()).unwrap();
    let ctx = random_tokens(40, 6, 90);
    let out = p
        .decode_step(
            &[DecodeRequest {
                request_id: 0,
                delta_id: "id".into(),
                context: ctx.clone(),
            }],
            DecodeMode::Shared,
        )
        .unwrap();
    let plain = signdelta::model::forward(&ModelView::merged(&f.base).unwrap(), &ctx).unwrap();
    assert!(relative_error(&out[0], plain.row(5)) < 1e-6);
}

#[test]
fn request_errors() {
    let f = fixture(1, 8);
    let mut p = pool(&f);
    let mut reqs = requests(&[0], 4, 1);
    reqs[0].delta_id = "nope".into();
    assert!(matches!(p.decode_step(&reqs, DecodeMode::Shared), Err(Error::UnknownDelta(_))));
    let reqs = requests(&[0], 17, 1);
    assert!(matches!(p.decode_step(&reqs, DecodeMode::Shared), Err(Error::SequenceTooLong { .. })));
    let mut reqs = requests(&[0, 0], 4, 1);
    reqs[1].request_id = 0;
    assert!(p.decode_step(&reqs, DecodeMode::Shared).is_err());
}

#[test]
fn registration_errors() {
    let f = fixture(1, 9);
    let mut p = pool(&f);
    assert!(matches!(p.register("d0", f.deltas[0].clone()), Err(Error::DuplicateDelta(_))));
    let other = random_checkpoint(
        &ToyArchConfig {
            intermediate: 40,
            ..small()
        },
        1,
    )
    .unwrap();
    let bad = build_delta_file(&other, &other, 1, &QuantPolicy::BlockLinear).unwrap();
    match p.register("bad", bad) {
        Err(Error::ShapeMismatch { name, .. }) => assert_eq!(name, "layers.0.mlp_down"),
        other => panic!("{other:?}"),
    }
}

/// Bytes of the tensor data region of a serialized delta plus four bytes per
/// stored scale, read back from the file itself.
fn serialized_delta_bytes(bytes: &[u8]) -> u64 {
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let header: serde_json::Value = serde_json::from_slice(&bytes[12..12 + header_len]).unwrap();
    let scales: usize = header["tensors"]
        .as_array()
        .unwrap()
        .iter()
        .map(|t| t["scales"].as_array().unwrap().len())
        .sum();
    (bytes.len() - 12 - header_len + 4 * scales) as u64
}

fn serialized_backbone_bytes(ckpt: &ModelCheckpoint) -> u64 {
    ckpt.to_safetensors().tensors.values().map(|t| t.bytes.len() as u64).sum()
}

#[test]
fn resident_bytes_match_serialized_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let f = fixture(4, 10);
    let mut p = ServingPool::from_checkpoint(&f.base).unwrap();
    let backbone = serialized_backbone_bytes(&f.base);
    assert_eq!(p.resident_bytes(), backbone);
    let mut expected = backbone;
    for (i, d) in f.deltas.iter().enumerate() {
        let path = dir.path().join(format!("{i}.bdelta"));
        d.write(&path).unwrap();
        p.register_delta(&format!("d{i}"), &path, true).unwrap();
        expected += serialized_delta_bytes(&std::fs::read(&path).unwrap());
        assert_eq!(p.resident_bytes(), expected);
    }
    let report = p.memory_report(4, 8);
    assert_eq!(report.model.backbone_bytes + 4 * report.model.per_delta_bytes, expected);
    assert_eq!(report.shared_bytes, expected + report.activation_bytes);

    // cold registration costs nothing until first use
    let cold = dir.path().join("cold.bdelta");
    f.deltas[0].write(&cold).unwrap();
    p.register_delta("cold", &cold, false).unwrap();
    assert_eq!(p.resident_bytes(), expected);
    assert!(p.load_times_ms().is_empty());
    p.decode_step(
        &[DecodeRequest {
            request_id: 0,
            delta_id: "cold".into(),
            context: vec![1, 2],
        }],
        DecodeMode::Shared,
    )
    .unwrap();
    assert_eq!(p.resident_bytes(), expected + serialized_delta_bytes(&std::fs::read(&cold).unwrap()));
    assert!(p.load_times_ms().contains_key("cold"));
}

#[test]
fn quantized_backbone_counts_int8_bytes() {
    let f = fixture(1, 11);
    let q = quantize_checkpoint(&f.base, &QuantPolicy::BlockLinear);
    let mut p = ServingPool::from_quantized(&q).unwrap();
    assert_eq!(p.backbone_bytes(), q.storage_bytes() as u64);
    p.register("d0", f.deltas[0].clone()).unwrap();
    let out = p.decode_step(&requests(&[0], 5, 3), DecodeMode::Shared).unwrap();
    let naive = p.decode_step(&requests(&[0], 5, 3), DecodeMode::Naive).unwrap();
    assert!(relative_error(&out[0], &naive[0]) < 1e-4);
}

#[test]
fn linear_heavy_toy_bytes_touched_ratio() {
    let cfg = ToyArchConfig::linear_heavy();
    let base = random_checkpoint(&cfg, 1).unwrap();
    let fine = perturb(&base, Perturbation::Gaussian(0.01), &QuantPolicy::BlockLinear, 2).unwrap();
    let mut p = ServingPool::new(BaseModel::from_checkpoint(&base).unwrap());
    p.register("a", build_delta_file(&base, &fine, 1, &QuantPolicy::BlockLinear).unwrap()).unwrap();
    let m = p.memory_model();
    for b in 1..16 {
        assert!(m.bytes_touched(DecodeMode::Shared, b + 1) > m.bytes_touched(DecodeMode::Shared, b));
        assert_eq!(m.bytes_touched(DecodeMode::Shared, b), m.backbone_bytes + b as u64 * m.per_delta_bytes);
        assert_eq!(m.bytes_touched(DecodeMode::Naive, b), b as u64 * m.naive_per_model_bytes);
    }
    let ratio = m.bytes_touched(DecodeMode::Shared, 16) as f64 / m.bytes_touched(DecodeMode::Naive, 16) as f64;
    assert!(ratio < 0.15, "{ratio}");
}

#[test]
fn bench_rows_and_csv() {
    let f = fixture(2, 12);
    let mut p = pool(&f);
    let rows = p.latency_bench(&[1, 2, 4], &[DecodeMode::Shared, DecodeMode::Naive], 4, 3, 1, 0).unwrap();
    assert_eq!(rows.len(), 6);
    let model = p.memory_model();
    let shared: Vec<_> = rows.iter().filter(|r| r.mode == DecodeMode::Shared).collect();
    assert!(shared.iter().all(|r| r.resident_bytes == shared[0].resident_bytes));
    for r in &rows {
        assert_eq!(r.bytes_touched, model.bytes_touched(r.mode, r.batch));
        assert!(r.mean_ms > 0.0 && r.p50_ms > 0.0);
    }
    let csv = bench_csv(&rows);
    assert_eq!(csv.lines().next(), Some(BENCH_HEADER));
    assert_eq!(csv.lines().count(), 7);
    assert!(p.latency_bench(&[1], &[DecodeMode::Shared], 4, 2, 0, 0).is_err());
}
