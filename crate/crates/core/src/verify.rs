//! Self-checking property suites behind `ndt verify`.
//!
//! Each suite compares the implementation against an independent oracle
//! (finite differences, algebraic identities, brute-force counting) and
//! reports one [`CheckOutcome`] per property.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attention::{
    compute_lambda, AttentionLayer, Coefficient, ConstraintKind, DtAttentionLayer, LambdaParams, NdtAttentionLayer,
    VanillaAttentionLayer,
};
use crate::error::Result;
use crate::metrics::{binary_auc, classification_metrics, silhouette};
use crate::model::{ClassifierModel, ForwardMode, Mechanism, ModelConfig};
use crate::numerics::{finite_diff_check, Graph, Mask, ParamId, ParamStore, Tensor};
use crate::training::init_store;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub suite: String,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(suite: &str, name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            suite: suite.into(),
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub checks: Vec<CheckOutcome>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Redraws every raw coefficient vector (`lambda_q`, `lambda_k`) from
/// `N(0, std²)`, leaving all other parameters untouched.
pub fn spread_lambda_vectors(model: &mut ClassifierModel, std: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0, std).expect("finite std");
    for p in model.params.iter_mut() {
        if p.name.ends_with(".lambda_q") || p.name.ends_with(".lambda_k") {
            p.value.data_mut().iter_mut().for_each(|v| *v = dist.sample(&mut rng));
        }
    }
}

/// Small classifier used by the gradient suite: d=8, H=2, two layers.
pub fn gradcheck_model(mechanism: Mechanism, constraint: ConstraintKind, n_components: usize, seed: u64) -> Result<ClassifierModel> {
    let cfg = ModelConfig {
        vocab_size: 11,
        d_model: 8,
        n_heads: 2,
        n_layers: 2,
        n_components,
        constraint,
        mechanism,
        ffn_hidden: 12,
        max_seq_len: 8,
        n_classes: 3,
        dropout: 0.0,
    };
    let mut m = ClassifierModel::new(cfg, seed)?;
    spread_lambda_vectors(&mut m, 0.5, seed.wrapping_add(1));
    Ok(m)
}

/// Max per-tensor relative error of a full-classifier gradient check.
pub fn classifier_gradcheck(model: &ClassifierModel, eps: f64) -> Result<crate::numerics::GradCheckReport> {
    let ids = vec![2, 5, 7, 3, 0, 9, 4, 4, 0, 0];
    let mask = Mask::new(vec![2, 5], ids.iter().map(|&i| i != 0).collect())?;
    let mut store = model.params.clone();
    let all: Vec<ParamId> = store.ids().collect();
    finite_diff_check(&mut store, &all, eps, |g| {
        let z = model.logits(g, &ids, &mask, ForwardMode::Eval)?;
        g.cross_entropy(z, &[2, 0])
    })
}

pub fn gradient_suite(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut cases: Vec<(String, Mechanism, ConstraintKind, usize)> = ConstraintKind::ALL
        .iter()
        .map(|&k| (format!("ndt N=3 {k}"), Mechanism::Ndt, k, 3))
        .collect();
    cases.push(("dt".into(), Mechanism::Dt, ConstraintKind::NonNegative, 2));
    cases.push(("vanilla".into(), Mechanism::Vanilla, ConstraintKind::Bounded01, 1));
    let mut out = Vec::new();
    for (name, mech, kind, n) in cases {
        let m = gradcheck_model(mech, kind, n, seed)?;
        let r = classifier_gradcheck(&m, 3e-5)?;
        let worst = r.worst_param().map_or("-".into(), |p| p.name.clone());
        out.push(CheckOutcome::new(
            "gradient",
            name,
            r.max_rel_error < 1e-5,
            format!("max rel error {:.2e} at {worst} over {} entries", r.max_rel_error, r.entries_checked),
        ));
    }
    Ok(out)
}

fn random_input(rng: &mut ChaCha8Rng, b: usize, s: usize, d: usize) -> (Tensor, Mask) {
    let x: Vec<f64> = (0..b * s * d).map(|_| rng.random_range(-2.0..2.0)).collect();
    let mut m: Vec<bool> = (0..b * s).map(|_| rng.random_bool(0.75)).collect();
    for r in 0..b {
        m[r * s] = true;
    }
    (Tensor::new(vec![b, s, d], x).expect("shape"), Mask::new(vec![b, s], m).expect("shape"))
}

fn copy(store: &mut ParamStore, from: ParamId, to: ParamId) {
    let v = store.value(from).data().to_vec();
    store.set(to, &v).expect("matching shapes");
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Single-component NDT versus a vanilla layer with `d/2`-wide query/key
/// projections and the same weights.
pub fn reduction_check(seed: u64, trials: usize) -> Result<f64> {
    let (d, h) = (16, 2);
    let mut s = ParamStore::new();
    let ndt = NdtAttentionLayer::new(&mut s, "ndt", d, h, 1, ConstraintKind::Bounded01, 1)?;
    let van = VanillaAttentionLayer::with_qk_dim(&mut s, "van", d, h, d / 2)?;
    init_store(&mut s, seed);
    copy(&mut s, ndt.components[0].wq, van.projection.wq);
    copy(&mut s, ndt.components[0].wk, van.projection.wk);
    copy(&mut s, ndt.w_v, van.w_v);
    copy(&mut s, ndt.w_o, van.w_o);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa5a5);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let (b, sl) = (rng.random_range(1..4), rng.random_range(1..7));
        let (x, mask) = random_input(&mut rng, b, sl, d);
        let mut g = Graph::new(&s);
        let xv = g.constant(x);
        let a = ndt.forward(&mut g, xv, &mask)?.output;
        let v = van.forward(&mut g, xv, &mask)?.output;
        worst = worst.max(max_abs_diff(g.value(a), g.value(v)));
    }
    Ok(worst)
}

/// Two-component NDT with its coefficient pinned to `−λ` versus the
/// subtractive layer under weight sharing. Returns the worst deviation of
/// (override path, parameter path).
pub fn equivalence_check(seed: u64, trials: usize) -> Result<(f64, f64)> {
    let (d, h) = (16, 2);
    let mut s = ParamStore::new();
    let ndt = NdtAttentionLayer::new(&mut s, "ndt", d, h, 2, ConstraintKind::Unconstrained, 1)?;
    let dt = DtAttentionLayer::new(&mut s, "dt", d, h)?;
    init_store(&mut s, seed);
    for i in 0..2 {
        copy(&mut s, dt.components[i].wq, ndt.components[i].wq);
        copy(&mut s, dt.components[i].wk, ndt.components[i].wk);
    }
    copy(&mut s, dt.w_v, ndt.w_v);
    copy(&mut s, dt.w_o, ndt.w_o);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5a5a);
    let (mut worst_override, mut worst_param) = (0.0f64, 0.0f64);
    for _ in 0..trials {
        // Fresh DT coefficient each trial.
        let dtp = LambdaParams {
            lambda_q: (0..d / 4).map(|_| rng.random_range(-1.0..1.0)).collect(),
            lambda_k: (0..d / 4).map(|_| rng.random_range(-1.0..1.0)).collect(),
            alpha_init: rng.random_range(0.0..1.5),
            beta: rng.random_range(0.0..0.3),
        };
        dt.lambda.write(&mut s, &dtp)?;
        let lam = dt.lambda_value(&s);
        // λq = λk = 1 gives interaction 1 under the identity map, so the
        // NDT coefficient equals its alpha.
        ndt.lambdas[0].write(
            &mut s,
            &LambdaParams {
                lambda_q: vec![1.0; d / 4],
                lambda_k: vec![1.0; d / 4],
                alpha_init: -lam,
                beta: 0.0,
            },
        )?;
        let (b, sl) = (rng.random_range(1..4), rng.random_range(1..7));
        let (x, mask) = random_input(&mut rng, b, sl, d);
        let mut g = Graph::new(&s);
        let xv = g.constant(x);
        let reference = dt.forward(&mut g, xv, &mask)?.output;
        let pinned = g.scalar(-lam);
        let over = ndt.forward_with(&mut g, xv, &mask, &[Coefficient::One, Coefficient::Plus(pinned)])?.output;
        let param = ndt.forward(&mut g, xv, &mask)?.output;
        worst_override = worst_override.max(max_abs_diff(g.value(reference), g.value(over)));
        worst_param = worst_param.max(max_abs_diff(g.value(reference), g.value(param)));
    }
    Ok((worst_override, worst_param))
}

fn random_lambda(rng: &mut ChaCha8Rng, width: usize, kind: ConstraintKind) -> LambdaParams {
    let (lo, hi) = kind.closed_range();
    let (lo, hi) = (lo.max(-2.0), hi.min(2.0));
    LambdaParams {
        lambda_q: (0..width).map(|_| rng.random_range(-3.0..3.0)).collect(),
        lambda_k: (0..width).map(|_| rng.random_range(-3.0..3.0)).collect(),
        alpha_init: rng.random_range(lo..=hi),
        beta: rng.random_range(lo..=hi),
    }
}

/// Worst deviation of combined-map row sums from `1 + Σλ` (NDT) or
/// `1 − λ` (DT) over random layers and inputs.
pub fn row_sum_check(seed: u64, trials: usize) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1234);
    let d = 8;
    let mut worst = 0.0f64;
    for t in 0..trials {
        let mut s = ParamStore::new();
        let dt_trial = t % 5 == 4;
        let (layer, expected) = if dt_trial {
            let l = DtAttentionLayer::new(&mut s, "dt", d, 2)?;
            init_store(&mut s, rng.random());
            let p = random_lambda(&mut rng, d / 4, DtAttentionLayer::CONSTRAINT);
            l.lambda.write(&mut s, &p)?;
            let lam = compute_lambda(&p, DtAttentionLayer::CONSTRAINT);
            (AttentionLayer::Dt(l), 1.0 - lam)
        } else {
            let n = rng.random_range(2..=4);
            let kind = ConstraintKind::ALL[rng.random_range(0..4)];
            let l = NdtAttentionLayer::new(&mut s, "ndt", d, 2, n, kind, rng.random_range(1..3))?;
            init_store(&mut s, rng.random());
            let mut sum = 1.0;
            for h in &l.lambdas {
                let p = random_lambda(&mut rng, d / 4, kind);
                h.write(&mut s, &p)?;
                sum += compute_lambda(&p, kind);
            }
            (AttentionLayer::Ndt(l), sum)
        };
        let (b, sl) = (rng.random_range(1..3), rng.random_range(1..6));
        let (x, mask) = random_input(&mut rng, b, sl, d);
        let mut g = Graph::new(&s);
        let xv = g.constant(x);
        let out = layer.forward(&mut g, xv, &mask)?;
        for row in g.value(out.combined_map).chunks(sl) {
            worst = worst.max((row.iter().sum::<f64>() - expected).abs());
        }
    }
    Ok(worst)
}

/// Number of random raw vectors whose constrained image falls outside the
/// codomain (expected 0), per kind. Raw entries stay within ±15: beyond
/// |x| ≈ 19 tanh rounds to exactly ±1 in f64.
pub fn constraint_range_check(seed: u64, samples: usize) -> Vec<(ConstraintKind, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x77);
    ConstraintKind::ALL
        .iter()
        .map(|&kind| {
            let bad = (0..samples)
                .filter(|_| {
                    let x: Vec<f64> = (0..8).map(|_| rng.random_range(-15.0..15.0)).collect();
                    crate::attention::constrain(&x, kind).iter().any(|&v| !kind.in_codomain(v))
                })
                .count();
            (kind, bad)
        })
        .collect()
}

/// Exhaustive concordant-pair AUC.
pub fn brute_force_auc(positive: &[bool], scores: &[f64]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if positive[i] && !positive[j] {
                den += 1.0;
                num += if scores[i] > scores[j] {
                    1.0
                } else if scores[i] == scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / den
}

/// Direct per-point silhouette definition.
pub fn brute_force_silhouette(points: &[Vec<f64>], labels: &[usize]) -> f64 {
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let n = points.len();
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let mut total = 0.0;
    for i in 0..n {
        let own: Vec<usize> = (0..n).filter(|&j| j != i && labels[j] == labels[i]).collect();
        if own.is_empty() {
            continue;
        }
        let a = own.iter().map(|&j| dist(&points[i], &points[j])).sum::<f64>() / own.len() as f64;
        let mut b = f64::INFINITY;
        for &c in classes.iter().filter(|&&c| c != labels[i]) {
            let members: Vec<usize> = (0..n).filter(|&j| labels[j] == c).collect();
            let m = members.iter().map(|&j| dist(&points[i], &points[j])).sum::<f64>() / members.len() as f64;
            b = b.min(m);
        }
        total += (b - a) / a.max(b);
    }
    total / n as f64
}

pub fn metric_suite(seed: u64, cases: usize) -> Vec<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xbeef);
    let (mut auc_worst, mut auc_cases) = (0.0f64, 0);
    while auc_cases < cases {
        let n = rng.random_range(2..=12);
        let pos: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        if pos.iter().all(|&p| p) || pos.iter().all(|&p| !p) {
            continue;
        }
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..5) as f64 / 4.0).collect();
        let got = binary_auc(&pos, &scores).expect("two classes");
        auc_worst = auc_worst.max((got - brute_force_auc(&pos, &scores)).abs());
        auc_cases += 1;
    }
    let mut sil_worst = 0.0f64;
    for _ in 0..cases {
        let n = rng.random_range(2..=50);
        let dim = rng.random_range(1..5);
        let k = rng.random_range(2..=4.min(n));
        let mut labels: Vec<usize> = (0..n).map(|i| if i < k { i } else { rng.random_range(0..k) }).collect();
        labels.rotate_left(rng.random_range(0..n));
        let pts: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| rng.random_range(-5.0..5.0)).collect()).collect();
        let flat: Vec<f64> = pts.iter().flatten().copied().collect();
        let got = silhouette(&flat, dim, &labels).expect("two classes");
        sil_worst = sil_worst.max((got - brute_force_silhouette(&pts, &labels)).abs());
    }
    let mut tally_ok = true;
    for _ in 0..cases {
        let c = rng.random_range(2..=5);
        let n = rng.random_range(1..40);
        let t: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let p: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let m = classification_metrics(&t, &p, c).expect("valid");
        tally_ok &= m == hand_tally(&t, &p, c);
    }
    vec![
        CheckOutcome::new("metrics", "auc = concordant-pair count", auc_worst == 0.0, format!("max |Δ| {auc_worst:e} over {cases} cases")),
        CheckOutcome::new("metrics", "silhouette = brute force", sil_worst < 1e-10, format!("max |Δ| {sil_worst:e} over {cases} cases")),
        CheckOutcome::new("metrics", "precision/recall/F1 = hand tally", tally_ok, format!("{cases} cases")),
    ]
}

/// Metrics recomputed with plain counting loops.
pub fn hand_tally(t: &[usize], p: &[usize], c: usize) -> crate::metrics::ClassificationMetrics {
    let mut confusion = vec![vec![0u64; c]; c];
    let mut correct = 0;
    for i in 0..t.len() {
        confusion[t[i]][p[i]] += 1;
        if t[i] == p[i] {
            correct += 1;
        }
    }
    let (mut precision, mut recall, mut f1, mut absent) = (vec![], vec![], vec![], vec![]);
    for k in 0..c {
        let tp = t.iter().zip(p).filter(|(&a, &b)| a == k && b == k).count() as f64;
        let fp = t.iter().zip(p).filter(|(&a, &b)| a != k && b == k).count() as f64;
        let fneg = t.iter().zip(p).filter(|(&a, &b)| a == k && b != k).count() as f64;
        if tp + fp + fneg == 0.0 {
            absent.push(k);
        }
        let pr = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let rc = if tp + fneg > 0.0 { tp / (tp + fneg) } else { 0.0 };
        precision.push(pr);
        recall.push(rc);
        f1.push(if pr + rc > 0.0 { 2.0 * pr * rc / (pr + rc) } else { 0.0 });
    }
    let mean = |v: &Vec<f64>| v.iter().sum::<f64>() / c as f64;
    crate::metrics::ClassificationMetrics {
        accuracy: correct as f64 / t.len() as f64,
        precision_macro: mean(&precision),
        recall_macro: mean(&recall),
        f1_macro: mean(&f1),
        precision,
        recall,
        f1,
        confusion,
        absent_classes: absent,
    }
}

/// Runs every suite.
pub fn run_all(seed: u64) -> Result<VerifyReport> {
    let mut checks = gradient_suite(seed)?;
    let r = reduction_check(seed, 100)?;
    checks.push(CheckOutcome::new("reduction", "ndt N=1 = vanilla (d/2 q/k)", r <= 1e-12, format!("max |Δ| {r:e}")));
    let (o, p) = equivalence_check(seed, 100)?;
    checks.push(CheckOutcome::new("equivalence", "ndt N=2, λ₁ = −λ (override) = dt", o <= 1e-12, format!("max |Δ| {o:e}")));
    checks.push(CheckOutcome::new("equivalence", "ndt N=2, λ₁ = −λ (parameters) = dt", p <= 1e-12, format!("max |Δ| {p:e}")));
    let rs = row_sum_check(seed, 1000)?;
    checks.push(CheckOutcome::new("row-sum", "rows sum to 1 + Σλ (ndt) / 1 − λ (dt)", rs <= 1e-9, format!("max |Δ| {rs:e}")));
    for (kind, bad) in constraint_range_check(seed, 10_000) {
        checks.push(CheckOutcome::new(
            "constraint-range",
            format!("{kind} codomain {}", kind.label()),
            bad == 0,
            format!("{bad} of 10000 vectors outside"),
        ));
    }
    checks.extend(metric_suite(seed, 200));
    Ok(VerifyReport { seed, checks })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suites_pass_on_seed_zero() {
        let report = run_all(0).unwrap();
        for c in &report.checks {
            assert!(c.passed, "{c:?}");
        }
    }

    #[test]
    fn wrong_gradient_rule_is_caught() {
        // x·stop_grad(x) has true derivative 2x but records x.
        let mut s = ParamStore::new();
        let id = s.add("x", Tensor::vector(vec![0.3, -1.2, 2.0]), crate::numerics::ParamGroup::Main);
        let r = finite_diff_check(&mut s, &[id], 1e-5, |g| {
            let x = g.param(id);
            let frozen = g.constant(g.tensor(x));
            let y = g.mul(x, frozen)?;
            Ok(g.sum(y))
        })
        .unwrap();
        assert!(r.max_rel_error > 0.3, "{r:?}");
    }
}
