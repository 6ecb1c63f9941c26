use std::collections::BTreeSet;

use signdelta::config::ToyArchConfig;
use signdelta::delta_file::{build_delta_file, QuantPolicy};
use signdelta::model::ops::rmsnorm;
use signdelta::model::{forward, forward_with_tape, loss_and_grads, BaseModel, EffectiveWeights, ModelView};
use signdelta::synth::{perturb, random_checkpoint, random_tokens, Perturbation};
use signdelta::tensor::relative_error;
use signdelta::{DenseMatrix, Error};

fn small() -> ToyArchConfig {
    ToyArchConfig {
        vocab: 48,
        dim: 16,
        n_layers: 2,
        n_heads: 2,
        intermediate: 20,
        max_seq: 12,
        rope_theta: 10000.0,
    }
}

#[test]
fn merged_and_decomposed_views_agree() {
    for seed in 0..100 {
        let base = random_checkpoint(&small(), seed).unwrap();
        let fine = perturb(&base, Perturbation::Gaussian(0.03), &QuantPolicy::BlockLinear, seed + 500).unwrap();
        let bits = 1 + (seed as usize % 3);
        let delta = build_delta_file(&base, &fine, bits, &QuantPolicy::BlockLinear).unwrap();
        let merged = ModelView::merged(&signdelta::apply_delta(&base, &delta).unwrap()).unwrap();
        let split = ModelView::decomposed(&BaseModel::from_checkpoint(&base).unwrap(), &delta).unwrap();
        let tokens = random_tokens(48, 9, seed + 1000);
        let a = forward(&merged, &tokens).unwrap();
        let b = forward(&split, &tokens).unwrap();
        let err = relative_error(a.data(), b.data());
        assert!(err <= 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn changing_a_token_leaves_earlier_positions_untouched() {
    let view = ModelView::merged(&random_checkpoint(&small(), 1).unwrap()).unwrap();
    let tokens = random_tokens(48, 10, 2);
    let before = forward(&view, &tokens).unwrap();
    for t in [0, 4, 9] {
        let mut changed = tokens.clone();
        changed[t] = (changed[t] + 1) % 48;
        let after = forward(&view, &changed).unwrap();
        for p in 0..t {
            assert_eq!(before.row(p), after.row(p), "position {p} moved when token {t} changed");
        }
        assert_ne!(before.row(t), after.row(t));
    }
}

#[test]
fn forward_is_bit_identical_across_calls() {
    let view = ModelView::merged(&random_checkpoint(&small(), 3).unwrap()).unwrap();
    let tokens = random_tokens(48, 12, 4);
    let a = forward(&view, &tokens).unwrap();
    assert_eq!(a, forward(&view, &tokens).unwrap());
    let eff = EffectiveWeights::of(&view);
    let (taped, _) = forward_with_tape(&view, &eff, &tokens).unwrap();
    let (again, _) = forward_with_tape(&view, &eff, &tokens).unwrap();
    assert_eq!(taped, again);
    assert!(relative_error(taped.data(), a.data()) < 1e-5);
}

#[test]
fn constant_weights_single_token() {
    let mut ckpt = random_checkpoint(&small(), 5).unwrap();
    for m in ckpt.tensors.values_mut() {
        m.data_mut().fill(0.5);
    }
    let logits = forward(&ModelView::merged(&ckpt).unwrap(), &[7]).unwrap();
    assert_eq!(logits.shape(), (1, 48));
    assert!(logits.is_finite());
}

#[test]
fn rmsnorm_output_has_unit_rms() {
    let x = DenseMatrix::from_fn(5, 33, |i, j| ((i * 7 + j * 3) % 11) as f32 - 4.5 + i as f32);
    let (y, _) = rmsnorm(&x, &[1.0; 33]);
    for i in 0..5 {
        let rms = (y.row(i).iter().map(|v| (v * v) as f64).sum::<f64>() / 33.0).sqrt();
        assert!((rms - 1.0).abs() < 1e-5, "{rms}");
    }
}

#[test]
fn bad_inputs_are_rejected() {
    let view = ModelView::merged(&random_checkpoint(&small(), 6).unwrap()).unwrap();
    assert!(matches!(forward(&view, &[48]), Err(Error::TokenOutOfRange { .. })));
    assert!(matches!(forward(&view, &[1; 13]), Err(Error::SequenceTooLong { .. })));
    let teacher = DenseMatrix::zeros(3, 48);
    assert!(loss_and_grads(&view, &[1, 2], &teacher, &BTreeSet::new()).is_err());
}

#[test]
fn matched_target_gives_zero_gradients() {
    let base = random_checkpoint(&small(), 7).unwrap();
    let fine = perturb(&base, Perturbation::Gaussian(0.03), &QuantPolicy::BlockLinear, 8).unwrap();
    let delta = build_delta_file(&base, &fine, 1, &QuantPolicy::BlockLinear).unwrap();
    let view = ModelView::decomposed(&BaseModel::from_checkpoint(&base).unwrap(), &delta).unwrap();
    let tokens = random_tokens(48, 8, 9);
    let own = forward(&view, &tokens).unwrap();
    let names: BTreeSet<String> = delta.quantized_names().into_iter().map(String::from).collect();
    let (loss, grads) = loss_and_grads(&view, &tokens, &own, &names).unwrap();
    assert!(loss < 1e-12);
    for (name, g) in grads {
        let signdelta::model::ParamGrad::Scales(s) = g else { panic!("{name}") };
        assert!(s.iter().all(|v| v.abs() <= 1e-5), "{name}: {s:?}");
    }
}
