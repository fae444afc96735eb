use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numerics::Tensor;
use crate::training::init_store;
use crate::verify;

// Loop-based reference: explicit per-head score, softmax and mixing loops.
struct Reference {
    output: Vec<f64>,
    map: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
fn reference(
    x: &[f64],
    (b, s, d): (usize, usize, usize),
    mask: &[bool],
    heads: usize,
    comps: &[(&[f64], &[f64], usize)],
    coefs: &[f64],
    wv: &[f64],
    wo: &[f64],
) -> Reference {
    let proj = |w: &[f64], cols: usize| {
        let mut out = vec![0.0; b * s * cols];
        for r in 0..b * s {
            for c in 0..cols {
                out[r * cols + c] = (0..d).map(|i| x[r * d + i] * w[i * cols + c]).sum();
            }
        }
        out
    };
    let mut map = vec![0.0; b * heads * s * s];
    for (&(wq, wk, dqk), &coef) in comps.iter().zip(coefs) {
        let (q, k) = (proj(wq, dqk), proj(wk, dqk));
        let dh = dqk / heads;
        for bi in 0..b {
            for h in 0..heads {
                for i in 0..s {
                    let mut scores = vec![f64::NEG_INFINITY; s];
                    for j in 0..s {
                        if mask[bi * s + j] {
                            let mut dot = 0.0;
                            for c in 0..dh {
                                dot += q[(bi * s + i) * dqk + h * dh + c] * k[(bi * s + j) * dqk + h * dh + c];
                            }
                            scores[j] = dot / (dh as f64).sqrt();
                        }
                    }
                    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = scores.iter().map(|&v| (v - m).exp()).sum();
                    for j in 0..s {
                        map[((bi * heads + h) * s + i) * s + j] += coef * (scores[j] - m).exp() / z;
                    }
                }
            }
        }
    }
    let v = proj(wv, d);
    let dv = d / heads;
    let mut merged = vec![0.0; b * s * d];
    for bi in 0..b {
        for h in 0..heads {
            for i in 0..s {
                for c in 0..dv {
                    merged[(bi * s + i) * d + h * dv + c] =
                        (0..s).map(|j| map[((bi * heads + h) * s + i) * s + j] * v[(bi * s + j) * d + h * dv + c]).sum();
                }
            }
        }
    }
    let mut output = vec![0.0; b * s * d];
    for r in 0..b * s {
        for c in 0..d {
            output[r * d + c] = (0..d).map(|i| merged[r * d + i] * wo[i * d + c]).sum();
        }
    }
    Reference { output, map }
}

fn rand_input(rng: &mut ChaCha8Rng, b: usize, s: usize, d: usize) -> (Vec<f64>, Vec<bool>) {
    let x = (0..b * s * d).map(|_| rng.random_range(-1.5..1.5)).collect();
    let mut m: Vec<bool> = (0..b * s).map(|_| rng.random_bool(0.7)).collect();
    for r in 0..b {
        m[r * s] = true;
    }
    (x, m)
}

fn run(layer: &AttentionLayer, s: &ParamStore, x: &[f64], shape: (usize, usize, usize), mask: &[bool]) -> (Vec<f64>, Vec<f64>) {
    let (b, sl, d) = shape;
    let mut g = Graph::new(s);
    let xv = g.constant(Tensor::new(vec![b, sl, d], x.to_vec()).unwrap());
    let m = Mask::new(vec![b, sl], mask.to_vec()).unwrap();
    let out = layer.forward(&mut g, xv, &m).unwrap();
    (g.value(out.output).to_vec(), g.value(out.combined_map).to_vec())
}

fn close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "entry {i}: {x} vs {y}");
    }
}

fn v(s: &ParamStore, id: ParamId) -> &[f64] {
    s.value(id).data()
}

#[test]
fn constrain_examples() {
    assert_eq!(constrain(&[0.0], ConstraintKind::Bounded01), vec![0.5]);
    assert_eq!(constrain(&[0.0], ConstraintKind::Symmetric11), vec![0.0]);
    assert_eq!(constrain(&[-2.0], ConstraintKind::NonNegative), vec![0.0]);
    assert_eq!(constrain(&[3.7], ConstraintKind::Unconstrained), vec![3.7]);
}

#[test]
fn compute_lambda_examples() {
    let ones = LambdaParams {
        lambda_q: vec![1.0; 4],
        lambda_k: vec![1.0; 4],
        alpha_init: 0.37,
        beta: 0.05,
    };
    assert_eq!(compute_lambda(&ones, ConstraintKind::Unconstrained), 0.37);
    let zeros = LambdaParams {
        lambda_q: vec![0.0; 4],
        ..ones.clone()
    };
    assert_eq!(compute_lambda(&zeros, ConstraintKind::Unconstrained), 0.05);
    let half = LambdaParams {
        lambda_q: vec![0.5; 4],
        lambda_k: vec![0.5; 4],
        alpha_init: 0.15,
        beta: 0.05,
    };
    let s = 1.0 / (1.0 + (-0.5f64).exp());
    let expected = s * s * 0.15 + (1.0 - s * s) * 0.05;
    assert!((compute_lambda(&half, ConstraintKind::Bounded01) - expected).abs() < 1e-15);
}

#[test]
fn parses_constraint_names() {
    for k in ConstraintKind::ALL {
        assert_eq!(k.as_str().parse::<ConstraintKind>().unwrap(), k);
        assert_eq!(k.label().parse::<ConstraintKind>().unwrap(), k);
    }
    assert!("cubic".parse::<ConstraintKind>().is_err());
}

#[test]
fn alpha_schedule() {
    assert!((alpha_init_schedule(1, 1, ConstraintKind::Bounded01) - 0.1).abs() < 1e-15);
    assert!((alpha_init_schedule(3, 2, ConstraintKind::Unconstrained) - 0.27).abs() < 1e-15);
    // Deeper layers start larger, later components smaller.
    assert!(alpha_init_schedule(2, 1, ConstraintKind::NonNegative) > alpha_init_schedule(1, 1, ConstraintKind::NonNegative));
    assert!(alpha_init_schedule(2, 3, ConstraintKind::NonNegative) < alpha_init_schedule(2, 1, ConstraintKind::NonNegative));
    assert_eq!(alpha_init_schedule(20, 1, ConstraintKind::Symmetric11), 1.0);
}

#[test]
fn ndt_matches_loop_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for kind in ConstraintKind::ALL {
        let (b, sl, d, h) = (2, 4, 8, 2);
        let mut s = ParamStore::new();
        let l = NdtAttentionLayer::new(&mut s, "a", d, h, 3, kind, 2).unwrap();
        init_store(&mut s, 9);
        for hd in &l.lambdas {
            let p = LambdaParams {
                lambda_q: (0..d / 4).map(|_| rng.random_range(-2.0..2.0)).collect(),
                lambda_k: (0..d / 4).map(|_| rng.random_range(-2.0..2.0)).collect(),
                alpha_init: kind.clamp(rng.random_range(-0.8..0.8)),
                beta: kind.clamp(rng.random_range(-0.3..0.3)),
            };
            hd.write(&mut s, &p).unwrap();
        }
        let mut coefs = vec![1.0];
        coefs.extend(l.lambdas.iter().map(|hd| compute_lambda(&hd.read(&s), kind)));
        let comps: Vec<_> = l.components.iter().map(|c| (v(&s, c.wq), v(&s, c.wk), d / 2)).collect();
        let (x, m) = rand_input(&mut rng, b, sl, d);
        let r = reference(&x, (b, sl, d), &m, h, &comps, &coefs, v(&s, l.w_v), v(&s, l.w_o));
        let layer = AttentionLayer::Ndt(l.clone());
        let (out, map) = run(&layer, &s, &x, (b, sl, d), &m);
        close(&out, &r.output, 1e-10);
        close(&map, &r.map, 1e-12);
    }
}

#[test]
fn dt_and_vanilla_match_loop_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (b, sl, d, h) = (2, 3, 8, 2);
    let mut s = ParamStore::new();
    let dt = DtAttentionLayer::new(&mut s, "dt", d, h).unwrap();
    let van = VanillaAttentionLayer::new(&mut s, "v", d, h).unwrap();
    init_store(&mut s, 1);
    verify_spread(&mut s, &dt.lambda, 5);
    let lam = dt.lambda_value(&s);
    assert!(lam > 0.0);
    let (x, m) = rand_input(&mut rng, b, sl, d);
    let comps: Vec<_> = dt.components.iter().map(|c| (v(&s, c.wq), v(&s, c.wk), d / 2)).collect();
    let r = reference(&x, (b, sl, d), &m, h, &comps, &[1.0, -lam], v(&s, dt.w_v), v(&s, dt.w_o));
    let (out, _) = run(&AttentionLayer::Dt(dt.clone()), &s, &x, (b, sl, d), &m);
    close(&out, &r.output, 1e-10);

    let comps = [(v(&s, van.projection.wq), v(&s, van.projection.wk), d)];
    let r = reference(&x, (b, sl, d), &m, h, &comps, &[1.0], v(&s, van.w_v), v(&s, van.w_o));
    let (out, _) = run(&AttentionLayer::Vanilla(van.clone()), &s, &x, (b, sl, d), &m);
    close(&out, &r.output, 1e-10);
}

fn verify_spread(s: &mut ParamStore, h: &LambdaHandles, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for id in [h.lambda_q, h.lambda_k] {
        for x in s.value_mut(id) {
            *x = rng.random_range(0.1..1.0);
        }
    }
}

#[test]
fn single_component_reduces_to_vanilla() {
    assert!(verify::reduction_check(11, 25).unwrap() <= 1e-12);
}

#[test]
fn two_components_with_negated_coefficient_equal_dt() {
    let (over, param) = verify::equivalence_check(12, 25).unwrap();
    assert!(over <= 1e-12, "{over}");
    assert!(param <= 1e-12, "{param}");
}

#[test]
fn rows_sum_to_one_plus_lambdas() {
    assert!(verify::row_sum_check(13, 200).unwrap() <= 1e-9);
}

#[test]
fn dt_identical_components_sum_to_one_minus_lambda() {
    let (d, h) = (8, 2);
    let mut s = ParamStore::new();
    let dt = DtAttentionLayer::new(&mut s, "dt", d, h).unwrap();
    init_store(&mut s, 2);
    let (q, k) = (v(&s, dt.components[0].wq).to_vec(), v(&s, dt.components[0].wk).to_vec());
    s.set(dt.components[1].wq, &q).unwrap();
    s.set(dt.components[1].wk, &k).unwrap();
    verify_spread(&mut s, &dt.lambda, 8);
    let lam = dt.lambda_value(&s);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (x, m) = rand_input(&mut rng, 1, 5, d);
    let (_, map) = run(&AttentionLayer::Dt(dt), &s, &x, (1, 5, d), &m);
    for row in map.chunks(5) {
        assert!((row.iter().sum::<f64>() - (1.0 - lam)).abs() < 1e-12);
    }
}

#[test]
fn dt_vanishing_lambda_is_single_component() {
    let (b, sl, d, h) = (1, 4, 8, 2);
    let mut s = ParamStore::new();
    let dt = DtAttentionLayer::new(&mut s, "dt", d, h).unwrap();
    init_store(&mut s, 6);
    dt.lambda
        .write(
            &mut s,
            &LambdaParams {
                lambda_q: vec![-40.0; d / 4],
                lambda_k: vec![0.3; d / 4],
                alpha_init: 0.8,
                beta: 0.0,
            },
        )
        .unwrap();
    assert_eq!(dt.lambda_value(&s), 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (x, m) = rand_input(&mut rng, b, sl, d);
    let comps = [(v(&s, dt.components[0].wq), v(&s, dt.components[0].wk), d / 2)];
    let r = reference(&x, (b, sl, d), &m, h, &comps, &[1.0], v(&s, dt.w_v), v(&s, dt.w_o));
    let (out, _) = run(&AttentionLayer::Dt(dt.clone()), &s, &x, (b, sl, d), &m);
    close(&out, &r.output, 1e-9);
}

#[test]
fn dt_two_token_hand_expansion() {
    // One head, d=4: scores are scalars per (i, j); expand the 2×2 softmax by hand.
    let (d, h) = (4, 1);
    let mut s = ParamStore::new();
    let dt = DtAttentionLayer::new(&mut s, "dt", d, h).unwrap();
    init_store(&mut s, 21);
    verify_spread(&mut s, &dt.lambda, 21);
    let lam = dt.lambda_value(&s);
    let x = [0.3, -0.7, 1.1, 0.2, -0.4, 0.9, 0.5, -1.3];
    let row = |i: usize| &x[i * d..(i + 1) * d];
    let proj = |r: &[f64], w: &[f64], cols: usize| -> Vec<f64> {
        (0..cols).map(|c| (0..d).map(|k| r[k] * w[k * cols + c]).sum()).collect()
    };
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut map = [[0.0; 2]; 2];
    for (ci, coef) in [(0, 1.0), (1, -lam)] {
        let (wq, wk) = (v(&s, dt.components[ci].wq), v(&s, dt.components[ci].wk));
        for i in 0..2 {
            let q = proj(row(i), wq, 2);
            let s0 = dot(&q, &proj(row(0), wk, 2)) / 2f64.sqrt();
            let s1 = dot(&q, &proj(row(1), wk, 2)) / 2f64.sqrt();
            let p0 = 1.0 / (1.0 + (s1 - s0).exp());
            map[i][0] += coef * p0;
            map[i][1] += coef * (1.0 - p0);
        }
    }
    let (_, got) = run(&AttentionLayer::Dt(dt), &s, &x, (1, 2, d), &[true, true]);
    close(&got, &[map[0][0], map[0][1], map[1][0], map[1][1]], 1e-9);
}

#[test]
fn single_token_map_is_one_plus_lambdas() {
    let d = 8;
    let mut s = ParamStore::new();
    let l = NdtAttentionLayer::new(&mut s, "a", d, 2, 3, ConstraintKind::Symmetric11, 1).unwrap();
    init_store(&mut s, 4);
    let total = 1.0 + l.lambda_snapshot(&s).iter().map(|p| p.1).sum::<f64>();
    let x: Vec<f64> = (0..d).map(|i| i as f64 * 0.1 - 0.3).collect();
    let (out, map) = run(&AttentionLayer::Ndt(l.clone()), &s, &x, (1, 1, d), &[true]);
    close(&map, &[total, total], 1e-14);
    // output = total · x W_v W_o
    let wv = v(&s, l.w_v);
    let wo = v(&s, l.w_o);
    let xv: Vec<f64> = (0..d).map(|c| (0..d).map(|i| x[i] * wv[i * d + c]).sum()).collect();
    let expected: Vec<f64> = (0..d).map(|c| total * (0..d).map(|i| xv[i] * wo[i * d + c]).sum::<f64>()).collect();
    close(&out, &expected, 1e-12);
}

#[test]
fn equal_keys_give_uniform_weights() {
    let (d, sl) = (8, 5);
    let mut s = ParamStore::new();
    let van = VanillaAttentionLayer::new(&mut s, "v", d, 2).unwrap();
    init_store(&mut s, 4);
    let tok: Vec<f64> = (0..d).map(|i| (i as f64).sin()).collect();
    let x: Vec<f64> = tok.iter().cycle().take(sl * d).copied().collect();
    let mask = [true, true, false, true, true];
    let (_, map) = run(&AttentionLayer::Vanilla(van), &s, &x, (1, sl, d), &mask);
    for row in map.chunks(sl) {
        for (j, &w) in row.iter().enumerate() {
            let want = if mask[j] { 0.25 } else { 0.0 };
            assert!((w - want).abs() < 1e-14);
        }
    }
}

#[test]
fn padded_positions_are_invisible() {
    let (b, sl, d) = (2, 5, 8);
    let mut s = ParamStore::new();
    let l = NdtAttentionLayer::new(&mut s, "a", d, 2, 3, ConstraintKind::Unconstrained, 1).unwrap();
    init_store(&mut s, 31);
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let (x, m) = rand_input(&mut rng, b, sl, d);
    let mut x2 = x.clone();
    for r in 0..b * sl {
        if !m[r] {
            x2[r * d..(r + 1) * d].iter_mut().for_each(|v| *v = rng.random_range(-9.0..9.0));
        }
    }
    let layer = AttentionLayer::Ndt(l);
    let (o1, _) = run(&layer, &s, &x, (b, sl, d), &m);
    let (o2, _) = run(&layer, &s, &x2, (b, sl, d), &m);
    for r in (0..b * sl).filter(|&r| m[r]) {
        close(&o1[r * d..(r + 1) * d], &o2[r * d..(r + 1) * d], 0.0);
    }

    // No gradient reaches padded inputs from unpadded outputs.
    let mut g = Graph::new(&s);
    let xv = g.input(Tensor::new(vec![b, sl, d], x).unwrap());
    let mask = Mask::new(vec![b, sl], m.clone()).unwrap();
    let out = layer.forward(&mut g, xv, &mask).unwrap().output;
    let keep: Vec<f64> = m.iter().flat_map(|&k| std::iter::repeat_n(if k { 1.0 } else { 0.0 }, d)).collect();
    let keep = g.constant(Tensor::new(vec![b, sl, d], keep).unwrap());
    let masked = g.mul(out, keep).unwrap();
    let sq = g.mul(masked, masked).unwrap();
    let loss = g.sum(sq);
    let grads = g.backward(loss).unwrap();
    let gx = grads.wrt(xv).unwrap();
    for r in (0..b * sl).filter(|&r| !m[r]) {
        assert!(gx[r * d..(r + 1) * d].iter().all(|&v| v == 0.0));
    }
    assert!(gx.iter().any(|&v| v != 0.0));
}

#[test]
fn snapshot_on_fresh_layer() {
    let mut s = ParamStore::new();
    let one = NdtAttentionLayer::new(&mut s, "one", 8, 2, 1, ConstraintKind::Bounded01, 1).unwrap();
    let two = NdtAttentionLayer::new(&mut s, "two", 8, 2, 2, ConstraintKind::NonNegative, 1).unwrap();
    init_store(&mut s, 0);
    assert!(one.lambda_snapshot(&s).is_empty());
    let snap = two.lambda_snapshot(&s);
    assert_eq!(snap.len(), 1);
    assert_eq!(snap[0].0, 1);
    assert_eq!(snap[0].1, compute_lambda(&two.lambdas[0].read(&s), ConstraintKind::NonNegative));
    // relu of N(0, 0.02²) entries: the interaction is tiny, so λ sits near β.
    assert!((snap[0].1 - BETA_INIT).abs() < 1e-3);
}

#[test]
fn projection_clamps_into_closed_range() {
    let mut s = ParamStore::new();
    let l = NdtAttentionLayer::new(&mut s, "a", 8, 2, 2, ConstraintKind::Bounded01, 1).unwrap();
    init_store(&mut s, 0);
    s.set(l.lambdas[0].alpha, &[1.7]).unwrap();
    s.set(l.lambdas[0].beta, &[-0.2]).unwrap();
    AttentionLayer::Ndt(l.clone()).project_coefficients(&mut s);
    assert_eq!(s.value(l.lambdas[0].alpha).data(), &[1.0]);
    assert_eq!(s.value(l.lambdas[0].beta).data(), &[0.0]);
}

#[test]
fn rejects_bad_widths_and_inputs() {
    let mut s = ParamStore::new();
    assert!(NdtAttentionLayer::new(&mut s, "a", 6, 1, 2, ConstraintKind::Bounded01, 1).is_err());
    assert!(NdtAttentionLayer::new(&mut s, "b", 8, 3, 2, ConstraintKind::Bounded01, 1).is_err());
    let l = NdtAttentionLayer::new(&mut s, "c", 8, 2, 2, ConstraintKind::Bounded01, 1).unwrap();
    init_store(&mut s, 0);
    let mut g = Graph::new(&s);
    let x = g.constant(Tensor::zeros(&[1, 3, 4]));
    assert!(l.forward(&mut g, x, &Mask::all_true(&[1, 3])).is_err());
    let x = g.constant(Tensor::zeros(&[1, 3, 8]));
    assert!(l.forward(&mut g, x, &Mask::all_true(&[1, 2])).is_err());
    assert!(l.forward(&mut g, x, &Mask::new(vec![1, 3], vec![false; 3]).unwrap()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn constrained_values_land_in_codomain(x in -15.0f64..15.0, k in 0usize..4) {
        let kind = ConstraintKind::ALL[k];
        prop_assert!(kind.in_codomain(kind.apply(x)));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lambda_lies_between_alpha_and_beta(
        q in prop::collection::vec(-4.0f64..4.0, 4),
        k in prop::collection::vec(-4.0f64..4.0, 4),
        a in 0.0f64..1.0,
        b in 0.0f64..1.0,
        kind in 0usize..3,
    ) {
        // Interaction is in [0, 1] for the bounded and non-negative maps
        // (after clipping relu inputs to ≤ 1 below), so λ is a convex mix.
        let kind = [ConstraintKind::Bounded01, ConstraintKind::Symmetric11, ConstraintKind::NonNegative][kind];
        let clip = |v: Vec<f64>| v.into_iter().map(|x| if kind == ConstraintKind::NonNegative { x.min(1.0) } else { x }).collect();
        let p = LambdaParams { lambda_q: clip(q), lambda_k: clip(k), alpha_init: a, beta: b };
        let inter = interaction(&p, kind);
        let lam = compute_lambda(&p, kind);
        if kind == ConstraintKind::Symmetric11 {
            prop_assert!((-1.0..=1.0).contains(&inter));
        } else {
            prop_assert!((0.0..=1.0).contains(&inter));
            prop_assert!(lam >= a.min(b) - 1e-15 && lam <= a.max(b) + 1e-15);
        }
    }

    #[test]
    fn row_sums_hold_for_random_layers(seed in any::<u64>()) {
        prop_assert!(verify::row_sum_check(seed, 2).unwrap() <= 1e-9);
    }
}
