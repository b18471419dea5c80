use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::grid::{GridSpec, MultiIndexSeq};

pub(crate) fn micro_config() -> ModelConfig {
    ModelConfig {
        layers: 1,
        heads: 1,
        embed_dim: 8,
        context_len: 5,
        grid_axis: 3,
        system_dim: 2,
        tt_rank: 2,
        seed: 11,
        ffn_mult: 4,
        factors: None,
    }
}

pub(crate) fn box_grid(d: usize, m: usize) -> GridSpec {
    GridSpec::new(vec![-1.0; d], vec![1.0; d], m).unwrap()
}

/// Model with all parameters redrawn at a larger scale so that every
/// nonlinearity is exercised.
pub(crate) fn scrambled(cfg: ModelConfig, scale: f64, seed: u64) -> SeqModel {
    let grid = box_grid(cfg.system_dim, cfg.grid_axis);
    let mut model = SeqModel::new(cfg, grid).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in model.params.tensors_mut() {
        for v in t.iter_mut() {
            *v = rng.gen_range(-scale..scale);
        }
    }
    model
}

pub(crate) fn random_seqs(n: usize, len: usize, d: usize, m: usize, seed: u64) -> Vec<MultiIndexSeq> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let idx = (0..len * d).map(|_| rng.gen_range(0..m)).collect();
            MultiIndexSeq::new(idx, d, m).unwrap()
        })
        .collect()
}

fn eval_loss(model: &SeqModel, inputs: &[MultiIndexSeq], targets: &[MultiIndexSeq], mask: &LossMask) -> f64 {
    let logits = model.forward(inputs).unwrap();
    loss_masked(&logits, targets, mask).unwrap()
}

#[test]
fn gradients_match_central_differences() {
    let model = scrambled(micro_config(), 0.6, 3);
    let inputs = random_seqs(2, 5, 2, 3, 4);
    let targets = random_seqs(2, 5, 2, 3, 5);
    let mask = LossMask::default();
    let (loss, grads) = model.gradients(&inputs, &targets, None).unwrap();
    assert!((loss - eval_loss(&model, &inputs, &targets, &mask)).abs() < 1e-12);

    let h = 1e-5;
    let views = grads.tensors();
    let mut worst = 0.0f64;
    for (ti, view) in views.iter().enumerate() {
        for j in 0..view.data.len() {
            let mut plus = model.clone();
            plus.params.tensors_mut()[ti][j] += h;
            let mut minus = model.clone();
            minus.params.tensors_mut()[ti][j] -= h;
            let fd = (eval_loss(&plus, &inputs, &targets, &mask) - eval_loss(&minus, &inputs, &targets, &mask))
                / (2.0 * h);
            let an = view.data[j];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-5);
            worst = worst.max(rel);
            assert!(rel < 1e-4, "{}[{j}]: analytic {an} vs numeric {fd}", view.name);
        }
    }
    assert!(worst < 1e-4);
}

#[test]
fn single_position_shape() {
    let model = scrambled(micro_config(), 0.3, 1);
    let seq = random_seqs(1, 1, 2, 3, 0);
    let logits = model.forward(&seq).unwrap();
    assert_eq!((logits.batch, logits.len, logits.dim, logits.axis_len), (1, 1, 2, 3));
    assert_eq!(logits.data.len(), 6);
}

#[test]
fn causality_is_exact() {
    let cfg = ModelConfig {
        layers: 2,
        heads: 2,
        embed_dim: 8,
        context_len: 8,
        grid_axis: 5,
        system_dim: 3,
        ..micro_config()
    };
    let model = scrambled(cfg, 0.5, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for probe in 0..20 {
        let base = random_seqs(1, 8, 3, 5, probe).pop().unwrap();
        let t = rng.gen_range(0..8);
        let mut changed = base.clone();
        let k = rng.gen_range(0..3);
        changed.indices[t * 3 + k] = (changed.indices[t * 3 + k] + 1 + rng.gen_range(0..4)) % 5;
        let a = model.forward(&[base]).unwrap();
        let b = model.forward(&[changed]).unwrap();
        let cut = t * 3 * 5;
        assert_eq!(a.data[..cut], b.data[..cut]);
    }
}

#[test]
fn batch_order_does_not_matter() {
    let model = scrambled(micro_config(), 0.4, 2);
    let seqs = random_seqs(3, 4, 2, 3, 21);
    let fwd = model.forward(&seqs).unwrap();
    let rev: Vec<_> = seqs.iter().rev().cloned().collect();
    let bwd = model.forward(&rev).unwrap();
    for b in 0..3 {
        for t in 0..4 {
            for k in 0..2 {
                assert_eq!(fwd.head(b, t, k), bwd.head(2 - b, t, k));
            }
        }
    }
}

#[test]
fn forward_rejects_bad_input() {
    let model = scrambled(micro_config(), 0.4, 2);
    let long = random_seqs(1, 6, 2, 3, 0);
    assert!(matches!(model.forward(&long), Err(Error::SequenceTooLong { .. })));
    let bad = MultiIndexSeq {
        indices: vec![0, 3],
        dim: 2,
        axis_len: 3,
    };
    assert!(matches!(model.forward(&[bad]), Err(Error::IndexOutOfRange { .. })));
    assert!(model.forward(&[]).is_err());
}

#[test]
fn uniform_logits_loss() {
    let logits = FactorizedLogits {
        data: vec![0.7; 4 * 2 * 3],
        batch: 2,
        len: 2,
        dim: 2,
        axis_len: 3,
    };
    let targets = random_seqs(2, 2, 2, 3, 1);
    let l = loss(&logits, &targets).unwrap();
    assert!((l - 2.0 * 3f64.ln()).abs() < 1e-12);
    assert!((l - 2.1972).abs() < 1e-4);
}

#[test]
fn confident_correct_logits_loss_vanishes() {
    let targets = random_seqs(1, 3, 2, 3, 4);
    let mut data = vec![0.0; 3 * 2 * 3];
    for t in 0..3 {
        for k in 0..2 {
            data[(t * 2 + k) * 3 + targets[0].row(t)[k]] = 30.0;
        }
    }
    let logits = FactorizedLogits {
        data,
        batch: 1,
        len: 3,
        dim: 2,
        axis_len: 3,
    };
    assert!(loss(&logits, &targets).unwrap() < 1e-9);
}

#[test]
fn joint_loss_equals_sum_of_head_losses() {
    let model = scrambled(micro_config(), 0.8, 5);
    let inputs = random_seqs(3, 5, 2, 3, 6);
    let targets = random_seqs(3, 5, 2, 3, 7);
    let logits = model.forward(&inputs).unwrap();
    let joint = loss(&logits, &targets).unwrap();
    let parts = head_losses(&logits, &targets).unwrap();
    assert!((joint - parts.iter().sum::<f64>()).abs() < 1e-12);
}

#[test]
fn loss_rejects_shape_mismatch() {
    let logits = FactorizedLogits {
        data: vec![0.0; 2 * 2 * 3],
        batch: 1,
        len: 2,
        dim: 2,
        axis_len: 3,
    };
    assert!(loss(&logits, &random_seqs(1, 3, 2, 3, 0)).is_err());
    assert!(loss(&logits, &random_seqs(2, 2, 2, 3, 0)).is_err());
}

#[test]
fn softmax_rows_normalize() {
    let model = scrambled(micro_config(), 1.0, 12);
    let logits = model.forward(&random_seqs(2, 5, 2, 3, 1)).unwrap();
    for b in 0..2 {
        for t in 0..5 {
            for k in 0..2 {
                let s: f64 = logits.probs(b, t, k).iter().sum();
                assert!((s - 1.0).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn empty_mask_gives_zero_gradients() {
    let model = scrambled(micro_config(), 0.5, 1);
    let inputs = random_seqs(1, 4, 2, 3, 2);
    let targets = random_seqs(1, 4, 2, 3, 3);
    let mask = LossMask {
        positions: Some(vec![false; 4]),
        dims: None,
    };
    let (l, g) = model.gradients(&inputs, &targets, Some(&mask)).unwrap();
    assert_eq!(l, 0.0);
    assert_eq!(g.sq_norm(), 0.0);
}

#[test]
fn masked_out_head_gets_no_gradient() {
    let model = scrambled(micro_config(), 0.5, 1);
    let inputs = random_seqs(2, 4, 2, 3, 2);
    let targets = random_seqs(2, 4, 2, 3, 3);
    let mask = LossMask {
        positions: None,
        dims: Some(vec![true, false]),
    };
    let (_, g) = model.gradients(&inputs, &targets, Some(&mask)).unwrap();
    assert!(g.heads[1].w.iter().chain(&g.heads[1].b).all(|&v| v == 0.0));
    assert!(g.heads[0].w.iter().any(|&v| v != 0.0));
}

#[test]
fn non_finite_gradient_names_group() {
    let mut model = scrambled(micro_config(), 0.5, 1);
    model.params.heads[0].w[0] = f64::NAN;
    let inputs = random_seqs(1, 3, 2, 3, 2);
    let targets = random_seqs(1, 3, 2, 3, 3);
    let err = model.gradients(&inputs, &targets, None).unwrap_err();
    // a NaN weight poisons the loss before any gradient is formed
    assert!(matches!(err, Error::NonFiniteLoss { .. } | Error::NonFiniteGradient { .. }));
}

#[test]
fn head_parameter_count_is_linear_in_grid() {
    let model = scrambled(micro_config(), 0.5, 1);
    let (d, m, w) = (2, 3, 8);
    assert_eq!(model.params.head_param_count(), d * (w * m + m));
    assert_eq!(model.params.heads.len(), d);
    assert!(model.params.heads.iter().all(|h| h.axis_len() == m));
}

#[test]
fn zero_temperature_generation_is_deterministic_and_contained() {
    let cfg = ModelConfig {
        context_len: 4,
        ..micro_config()
    };
    let model = scrambled(cfg, 0.7, 4);
    for seed in 0..10 {
        let prefix = random_seqs(1, 3, 2, 3, seed).pop().unwrap();
        let a = model.generate(&prefix, 12, 0.0, 1).unwrap();
        let b = model.generate(&prefix, 12, 0.0, 99).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 12);
        for x in a.decode(&model.grid).unwrap().chunks(2) {
            assert!(model.grid.contains(x));
        }
    }
}

#[test]
fn sampled_generation_is_seeded() {
    let model = scrambled(micro_config(), 0.7, 4);
    let prefix = random_seqs(1, 2, 2, 3, 0).pop().unwrap();
    let a = model.generate(&prefix, 10, 1.0, 5).unwrap();
    assert_eq!(a, model.generate(&prefix, 10, 1.0, 5).unwrap());
    assert!(a.indices.iter().all(|&i| i < 3));
}

#[test]
fn generation_rejects_empty_prefix() {
    let model = scrambled(micro_config(), 0.7, 4);
    let empty = MultiIndexSeq {
        indices: vec![],
        dim: 2,
        axis_len: 3,
    };
    assert!(model.generate(&empty, 3, 0.0, 0).is_err());
    let prefix = random_seqs(1, 2, 2, 3, 0).pop().unwrap();
    assert!(model.generate(&prefix, 3, -1.0, 0).is_err());
}

#[test]
fn equal_logits_pick_index_zero() {
    let mut model = scrambled(micro_config(), 0.7, 4);
    for h in model.params.heads.iter_mut() {
        h.w.iter_mut().for_each(|v| *v = 0.0);
        h.b.iter_mut().for_each(|v| *v = 0.25);
    }
    let prefix = random_seqs(1, 2, 2, 3, 0).pop().unwrap();
    let out = model.generate(&prefix, 6, 0.0, 0).unwrap();
    assert!(out.indices.iter().all(|&i| i == 0));
}

#[test]
fn shifting_one_head_bias_keeps_argmax_rollout() {
    let model = scrambled(micro_config(), 0.7, 4);
    let mut shifted = model.clone();
    shifted.params.heads[1].b.iter_mut().for_each(|v| *v += 3.5);
    let prefix = random_seqs(1, 3, 2, 3, 2).pop().unwrap();
    assert_eq!(
        model.generate(&prefix, 8, 0.0, 0).unwrap(),
        shifted.generate(&prefix, 8, 0.0, 0).unwrap()
    );
}

#[test]
fn construction_is_deterministic() {
    let a = SeqModel::new(micro_config(), box_grid(2, 3)).unwrap();
    let b = SeqModel::new(micro_config(), box_grid(2, 3)).unwrap();
    assert_eq!(a, b);
    let seqs = random_seqs(2, 5, 2, 3, 1);
    assert_eq!(a.forward(&seqs).unwrap(), b.forward(&seqs).unwrap());
}

#[test]
fn config_validation() {
    let mut cfg = micro_config();
    cfg.heads = 3;
    assert!(SeqModel::new(cfg, box_grid(2, 3)).is_err());
    let mut cfg = micro_config();
    cfg.context_len = 1;
    assert!(SeqModel::new(cfg, box_grid(2, 3)).is_err());
    assert!(SeqModel::new(micro_config(), box_grid(2, 5)).is_err());
}
