use super::*;
use crate::numerics::finite_diff_check;
use crate::training::{AdamW, OptimConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny_config(mechanism: Mechanism, constraint: ConstraintKind, n: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: 11,
        d_model: 8,
        n_heads: 2,
        n_layers: 2,
        n_components: n,
        constraint,
        mechanism,
        ffn_hidden: 12,
        max_seq_len: 8,
        n_classes: 3,
        dropout: 0.0,
    }
}

fn tiny(mechanism: Mechanism, constraint: ConstraintKind, n: usize) -> ClassifierModel {
    ClassifierModel::new(tiny_config(mechanism, constraint, n), 5).unwrap()
}

fn batch() -> (Vec<usize>, Mask) {
    let ids = vec![2, 5, 7, 3, 0, 9, 4, 4, 0, 0];
    let mask = Mask::new(vec![2, 5], ids.iter().map(|&i| i != 0).collect()).unwrap();
    (ids, mask)
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

/// Gradient check at a non-degenerate point: raw coefficient vectors are
/// redrawn at a scale where the constraint mappings are visibly nonlinear.
fn check_all(mut m: ClassifierModel) -> f64 {
    crate::verify::spread_lambda_vectors(&mut m, 0.5, 17);
    let (ids, mask) = batch();
    let model = m.clone();
    let all: Vec<_> = m.params.ids().collect();
    let r = finite_diff_check(&mut m.params, &all, 3e-5, |g| {
        let z = model.logits(g, &ids, &mask, ForwardMode::Eval)?;
        g.cross_entropy(z, &[2, 0])
    })
    .unwrap();
    assert_eq!(r.entries_checked, m.params.numel());
    r.max_rel_error
}

#[test]
fn gradcheck_full_classifier_all_constraints() {
    for kind in ConstraintKind::ALL {
        let err = check_all(tiny(Mechanism::Ndt, kind, 3));
        assert!(err < 1e-5, "{kind}: {err:e}");
    }
}

#[test]
fn gradcheck_baselines() {
    assert!(check_all(tiny(Mechanism::Dt, ConstraintKind::NonNegative, 2)) < 1e-5);
    assert!(check_all(tiny(Mechanism::Vanilla, ConstraintKind::Bounded01, 1)) < 1e-5);
}

#[test]
fn rmsnorm_examples() {
    let mut g = Graph::standalone();
    let x = g.constant(Tensor::vector(vec![1.0; 5]));
    let gain = g.constant(Tensor::vector(vec![1.0; 5]));
    let y = rmsnorm(&mut g, x, gain).unwrap();
    assert!(g.value(y).iter().all(|v| (v - 1.0).abs() < 1e-6));

    let x = g.constant(Tensor::vector(vec![3.0, -3.0]));
    let gain = g.constant(Tensor::vector(vec![1.0, 1.0]));
    let y = rmsnorm(&mut g, x, gain).unwrap();
    assert!((g.value(y)[0] - 1.0).abs() < 1e-6 && (g.value(y)[1] + 1.0).abs() < 1e-6);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let xs = rand_vec(&mut rng, 12, 2.0);
    let gs = rand_vec(&mut rng, 4, 1.5);
    let x = g.constant(Tensor::new(vec![3, 4], xs.clone()).unwrap());
    let gain = g.constant(Tensor::vector(gs.clone()));
    let y = rmsnorm(&mut g, x, gain).unwrap();
    for r in 0..3 {
        let row = &xs[r * 4..r * 4 + 4];
        let ms = row.iter().map(|v| v * v).sum::<f64>() / 4.0;
        for j in 0..4 {
            let want = row[j] / (ms + 1e-6).sqrt() * gs[j];
            assert!((g.value(y)[r * 4 + j] - want).abs() < 1e-12);
        }
    }
}

fn swiglu_store(rng: &mut ChaCha8Rng, d: usize, h: usize) -> (ParamStore, SwiGluWeights) {
    let mut s = ParamStore::new();
    let mut add = |name: &str, r: usize, c: usize| {
        s.add(name, Tensor::new(vec![r, c], rand_vec(rng, r * c, 0.8)).unwrap(), ParamGroup::Main)
    };
    let w = SwiGluWeights {
        w_gate: add("g", d, h),
        w_up: add("u", d, h),
        w_down: add("d", h, d),
    };
    (s, w)
}

#[test]
fn swiglu_zero_input_and_scalar_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (d, h) = (3, 5);
    let (s, w) = swiglu_store(&mut rng, d, h);
    let mut g = Graph::new(&s);
    let z = g.constant(Tensor::zeros(&[2, d]));
    let y = swiglu_ffn(&mut g, z, &w).unwrap();
    assert!(g.value(y).iter().all(|&v| v == 0.0));

    let xs = rand_vec(&mut rng, d, 1.0);
    let x = g.constant(Tensor::new(vec![1, d], xs.clone()).unwrap());
    let y = swiglu_ffn(&mut g, x, &w).unwrap();
    let m = |id: ParamId, i: usize, j: usize, cols: usize| s.value(id).data()[i * cols + j];
    for out in 0..d {
        let mut acc = 0.0;
        for k in 0..h {
            let a: f64 = (0..d).map(|i| xs[i] * m(w.w_gate, i, k, h)).sum();
            let b: f64 = (0..d).map(|i| xs[i] * m(w.w_up, i, k, h)).sum();
            acc += a / (1.0 + (-a).exp()) * b * m(w.w_down, k, out, d);
        }
        assert!((g.value(y)[out] - acc).abs() < 1e-12);
    }
}

#[test]
fn swiglu_gate_saturation_is_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut s, w) = swiglu_store(&mut rng, 2, 3);
    s.set(w.w_gate, &[50.0; 6]).unwrap();
    let mut g = Graph::new(&s);
    let xs = [0.4, 0.7];
    let x = g.constant(Tensor::new(vec![1, 2], xs.to_vec()).unwrap());
    let y = swiglu_ffn(&mut g, x, &w).unwrap();
    let up = s.value(w.w_up).data();
    let down = s.value(w.w_down).data();
    for out in 0..2 {
        let want: f64 = (0..3)
            .map(|k| {
                let a = 50.0 * (xs[0] + xs[1]);
                let b = xs[0] * up[k] + xs[1] * up[3 + k];
                a * b * down[k * 2 + out]
            })
            .sum();
        assert!((g.value(y)[out] - want).abs() < 1e-9 * want.abs().max(1.0));
    }
}

#[test]
fn swiglu_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (mut s, w) = swiglu_store(&mut rng, 3, 4);
    let xs = Tensor::new(vec![2, 3], rand_vec(&mut rng, 6, 1.0)).unwrap();
    let ids: Vec<_> = s.ids().collect();
    let r = finite_diff_check(&mut s, &ids, 1e-5, |g| {
        let x = g.constant(xs.clone());
        let y = swiglu_ffn(g, x, &w)?;
        let y2 = g.mul(y, y)?;
        Ok(g.sum(y2))
    })
    .unwrap();
    assert!(r.max_rel_error < 1e-6, "{r:?}");
}

#[test]
fn zeroed_sublayers_give_identity() {
    let mut m = tiny(Mechanism::Ndt, ConstraintKind::Bounded01, 2);
    let layer = m.layers[0].clone();
    let w_o = match &layer.attention {
        AttentionLayer::Ndt(a) => a.w_o,
        _ => unreachable!(),
    };
    let n = m.params.value(w_o).numel();
    m.params.set(w_o, &vec![0.0; n]).unwrap();
    let n = m.params.value(layer.ffn.w_down).numel();
    m.params.set(layer.ffn.w_down, &vec![0.0; n]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let xs = Tensor::new(vec![1, 3, 8], rand_vec(&mut rng, 24, 1.0)).unwrap();
    let mut g = Graph::new(&m.params);
    let x = g.constant(xs.clone());
    let y = encoder_layer(&mut g, x, &layer, &Mask::all_true(&[1, 3])).unwrap();
    assert_eq!(g.value(y), xs.data());
}

#[test]
fn encoder_layer_stable_for_large_inputs() {
    let m = tiny(Mechanism::Ndt, ConstraintKind::Unconstrained, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let xs = Tensor::new(vec![2, 4, 8], rand_vec(&mut rng, 64, 1e3)).unwrap();
    let mut g = Graph::new(&m.params);
    let x = g.constant(xs);
    let y = encoder_layer(&mut g, x, &m.layers[1], &Mask::all_true(&[2, 4])).unwrap();
    assert!(g.value(y).iter().all(|v| v.is_finite()));
}

#[test]
fn zeroed_head_gives_uniform_logits() {
    let mut cfg = tiny_config(Mechanism::Ndt, ConstraintKind::Bounded01, 2);
    cfg.n_classes = 2;
    let mut m = ClassifierModel::new(cfg, 1).unwrap();
    let hw = m.head_weight;
    m.params.set(hw, &[0.0; 16]).unwrap();
    let (ids, mask) = batch();
    let z = predict_logits(&m, &ids, &mask).unwrap();
    assert_eq!(z.data(), &[0.0; 4]);
}

#[test]
fn padded_ids_do_not_affect_logits() {
    for mech in [Mechanism::Vanilla, Mechanism::Dt, Mechanism::Ndt] {
        let n = if mech == Mechanism::Vanilla { 1 } else { 2 };
        let m = tiny(mech, ConstraintKind::Symmetric11, n);
        let (ids, mask) = batch();
        let base = predict_logits(&m, &ids, &mask).unwrap();
        let mut corrupted = ids.clone();
        corrupted[4] = 10;
        corrupted[8] = 3;
        corrupted[9] = 3;
        assert_eq!(predict_logits(&m, &corrupted, &mask).unwrap(), base);
    }
}

#[test]
fn golden_logits() {
    let m = tiny(Mechanism::Ndt, ConstraintKind::Bounded01, 3);
    let (ids, mask) = batch();
    let z = predict_logits(&m, &ids, &mask).unwrap();
    for (a, b) in z.data().iter().zip(GOLDEN) {
        assert!((a - b).abs() < 1e-9, "{:?}", z.data());
    }
}

const GOLDEN: [f64; 6] = [
    0.1504662754849937,
    -1.3508458546969897,
    -0.9995708408121776,
    1.5278054740880775,
    -1.7936425078198712,
    -1.717817516319277,
];

#[test]
fn pooled_single_token_matches_hidden_state() {
    let m = tiny(Mechanism::Ndt, ConstraintKind::NonNegative, 2);
    let mask = Mask::all_true(&[1, 1]);
    let mut g = Graph::new(&m.params);
    let h = m.encode(&mut g, &[6], &mask, ForwardMode::Eval).unwrap();
    let hidden = g.value(h).to_vec();
    assert_eq!(pooled_embedding(&m, &[6], &mask).unwrap().data(), hidden.as_slice());

    let padded = Mask::new(vec![1, 4], vec![true, false, false, false]).unwrap();
    let p = pooled_embedding(&m, &[6, 2, 3, 4], &padded).unwrap();
    for (a, b) in p.data().iter().zip(&hidden) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn batch_rows_are_equivariant() {
    let m = tiny(Mechanism::Ndt, ConstraintKind::Bounded01, 3);
    let (ids, mask) = batch();
    let p = pooled_embedding(&m, &ids, &mask).unwrap();
    let swapped_ids: Vec<usize> = ids[5..].iter().chain(&ids[..5]).copied().collect();
    let swapped_mask =
        Mask::new(vec![2, 5], mask.data()[5..].iter().chain(&mask.data()[..5]).copied().collect()).unwrap();
    let q = pooled_embedding(&m, &swapped_ids, &swapped_mask).unwrap();
    assert_eq!(&p.data()[..8], &q.data()[8..]);
    assert_eq!(&p.data()[8..], &q.data()[..8]);
}

#[test]
fn input_validation() {
    let m = tiny(Mechanism::Ndt, ConstraintKind::Bounded01, 2);
    let mask = Mask::all_true(&[1, 2]);
    assert!(predict_logits(&m, &[1, 11], &mask).is_err());
    let empty = Mask::new(vec![1, 2], vec![false, false]).unwrap();
    assert!(predict_logits(&m, &[1, 2], &empty).is_err());
    let long = Mask::all_true(&[1, 9]);
    assert!(predict_logits(&m, &[2; 9], &long).is_err());
}

#[test]
fn config_validation() {
    let ok = tiny_config(Mechanism::Ndt, ConstraintKind::Bounded01, 2);
    assert!(ok.validate().is_ok());
    for bad in [
        ModelConfig { d_model: 6, ..ok.clone() },
        ModelConfig { n_heads: 3, ..ok.clone() },
        ModelConfig { n_layers: 0, ..ok.clone() },
        ModelConfig { n_components: 5, ..ok.clone() },
        ModelConfig {
            mechanism: Mechanism::Dt,
            n_components: 1,
            ..ok.clone()
        },
    ] {
        assert!(bad.validate().is_err(), "{bad:?}");
    }
}

#[test]
fn vanilla_parameter_count_by_hand() {
    let cfg = ModelConfig {
        max_seq_len: 16,
        n_heads: 2,
        n_layers: 1,
        mechanism: Mechanism::Vanilla,
        n_components: 1,
        ..ModelConfig::new(10, 2).with_width(8)
    };
    let m = ClassifierModel::uninitialized(cfg).unwrap();
    let (d, v, s, h, c) = (8, 10, 16, 32, 2);
    let hand = v * d + s * d + d + 4 * d * d + d + 3 * d * h + d + d * c + c;
    let pc = param_count(&m);
    assert_eq!(pc.total, hand);
    assert_eq!(pc.total, pc.breakdown.iter().map(|(_, n)| n).sum::<usize>());
    assert_eq!(delta_params_vs_vanilla(&m).unwrap(), 0);
}

#[test]
fn component_overhead_formula() {
    for d in [8, 64, 128] {
        for layers in [1, 2] {
            let base = ModelConfig {
                n_layers: layers,
                n_heads: 2,
                max_seq_len: 16,
                ..ModelConfig::new(20, 2).with_width(d)
            };
            for n in 1..4 {
                let a = ClassifierModel::uninitialized(ModelConfig { n_components: n, ..base.clone() }).unwrap();
                let b = ClassifierModel::uninitialized(ModelConfig {
                    n_components: n + 1,
                    ..base.clone()
                })
                .unwrap();
                let extra = param_count(&b).total - param_count(&a).total;
                assert_eq!(extra, layers * (2 * d * (d / 2) + 2 * (d / 4) + 2));
            }
        }
    }
}

#[test]
fn dt_matches_two_component_ndt_parameter_count() {
    let base = ModelConfig::new(30, 2).with_width(16);
    let dt = ClassifierModel::uninitialized(ModelConfig {
        mechanism: Mechanism::Dt,
        ..base.clone()
    })
    .unwrap();
    let ndt = ClassifierModel::uninitialized(base).unwrap();
    assert_eq!(param_count(&dt).total, param_count(&ndt).total);
}

#[test]
fn seeded_init_and_step_are_bit_identical() {
    let bits = |m: &ClassifierModel| -> Vec<u64> {
        m.params
            .iter()
            .flat_map(|(_, p)| p.value.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
            .collect()
    };
    let mut a = tiny(Mechanism::Ndt, ConstraintKind::Bounded01, 3);
    let mut b = tiny(Mechanism::Ndt, ConstraintKind::Bounded01, 3);
    assert_eq!(bits(&a), bits(&b));
    let other = ClassifierModel::new(a.config.clone(), 6).unwrap();
    assert_ne!(bits(&a), bits(&other));
    let (ids, mask) = batch();
    for m in [&mut a, &mut b] {
        let grads = {
            let mut g = Graph::new(&m.params);
            let z = m.logits(&mut g, &ids, &mask, ForwardMode::Eval).unwrap();
            let l = g.cross_entropy(z, &[0, 1]).unwrap();
            g.backward(l).unwrap()
        };
        grads.accumulate_into(&mut m.params);
        AdamW::new(&m.params, OptimConfig::default())
            .unwrap()
            .step(&mut m.params)
            .unwrap();
    }
    assert_eq!(bits(&a), bits(&b));
}

#[test]
fn alpha_targets_follow_schedule() {
    let m = tiny(Mechanism::Ndt, ConstraintKind::Bounded01, 4);
    for (l, layer) in m.layers.iter().enumerate() {
        let AttentionLayer::Ndt(a) = &layer.attention else { unreachable!() };
        for (i, h) in a.lambdas.iter().enumerate() {
            let p = h.read(&m.params);
            let want = 0.1 * (l + 1) as f64 * 0.9f64.powi(i as i32);
            assert!((p.alpha_init - want).abs() < 1e-15);
            assert_eq!(p.beta, crate::attention::BETA_INIT);
        }
    }
}

#[test]
fn dropout_only_in_training_mode() {
    let mut cfg = tiny_config(Mechanism::Ndt, ConstraintKind::Bounded01, 2);
    cfg.dropout = 0.3;
    let m = ClassifierModel::new(cfg.clone(), 2).unwrap();
    let mut plain = ClassifierModel::new(ModelConfig { dropout: 0.0, ..cfg }, 2).unwrap();
    plain.params = m.params.clone();
    let (ids, mask) = batch();
    let eval = predict_logits(&m, &ids, &mask).unwrap();
    assert_eq!(eval, predict_logits(&plain, &ids, &mask).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut g = Graph::new(&m.params);
    let z = m.logits(&mut g, &ids, &mask, ForwardMode::Train(&mut rng)).unwrap();
    assert_ne!(g.tensor(z), eval);
}

#[test]
fn checkpoint_round_trip_and_rejections() {
    let dir = tempfile::tempdir().unwrap();
    let m = tiny(Mechanism::Ndt, ConstraintKind::Symmetric11, 3);
    let p = dir.path().join("m.ckpt");
    save_checkpoint(&p, &m, Some("abc")).unwrap();
    let back = load_checkpoint(&p).unwrap();
    assert_eq!(back.vocab_fingerprint.as_deref(), Some("abc"));
    assert_eq!(back.model.config, m.config);
    let (ids, mask) = batch();
    assert_eq!(
        predict_logits(&back.model, &ids, &mask).unwrap(),
        predict_logits(&m, &ids, &mask).unwrap()
    );

    let mut bytes = std::fs::read(&p).unwrap();
    bytes.push(0);
    std::fs::write(&p, &bytes).unwrap();
    assert!(load_checkpoint(&p).is_err());
    bytes.pop();
    bytes[8] = 9;
    std::fs::write(&p, &bytes).unwrap();
    assert!(load_checkpoint(&p).unwrap_err().to_string().contains("version"));
    std::fs::write(&p, b"not a checkpoint at all").unwrap();
    assert!(load_checkpoint(&p).is_err());
}

