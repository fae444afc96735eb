//! Parameter initialization, two-group AdamW, and the train/validate loop.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{make_batches, Dataset};
use crate::error::{Error, Result};
use crate::model::{predict_logits, ClassifierModel, ForwardMode};
use crate::numerics::{Graph, Init, ParamGroup, ParamId, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay_main: f64,
    pub weight_decay_lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Global gradient-norm bound; non-positive or infinite disables clipping.
    pub max_grad_norm: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay_main: 0.1,
            weight_decay_lambda: 0.0,
            epochs: 10,
            batch_size: 32,
            seed: 0,
            max_grad_norm: 1.0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if !(self.weight_decay_main >= 0.0 && self.weight_decay_lambda >= 0.0) {
            return Err(Error::Config("weight decays must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config("betas must lie in [0, 1) and eps must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }

    pub fn weight_decay(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Main => self.weight_decay_main,
            ParamGroup::Lambda => self.weight_decay_lambda,
        }
    }
}

/// Fills every parameter of the store according to its [`Init`] rule,
/// drawing in declaration order from one seeded stream.
pub fn init_store(store: &mut ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in store.iter_mut() {
        match p.init {
            Init::XavierUniform => {
                let b = xavier_bound(p.value.shape());
                for v in p.value.data_mut() {
                    *v = rng.random_range(-b..=b);
                }
            }
            Init::Normal { std } => {
                let dist = Normal::new(0.0, std).expect("finite std");
                for v in p.value.data_mut() {
                    *v = dist.sample(&mut rng);
                }
            }
            Init::Constant(c) => p.value.data_mut().fill(c),
        }
        p.grad = None;
    }
}

/// `sqrt(6 / (fan_in + fan_out))` for a `[fan_in, fan_out]` matrix.
pub fn xavier_bound(shape: &[usize]) -> f64 {
    let (fan_in, fan_out) = match shape {
        [a, b] => (*a, *b),
        [n] => (*n, *n),
        other => (other[..other.len() - 1].iter().product(), other[other.len() - 1]),
    };
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

pub fn init_parameters(model: &mut ClassifierModel, seed: u64) {
    init_store(&mut model.params, seed);
    model.project_coefficients();
}

/// Moment buffers and step counter of one optimizer group.
#[derive(Debug, Clone)]
pub struct GroupState {
    pub group: ParamGroup,
    pub members: Vec<ParamId>,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

/// Gradient norms around clipping for one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub grad_norm: f64,
    pub clipped_norm: f64,
}

/// AdamW with a decayed main group and an undecayed lambda group.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub cfg: OptimConfig,
    pub groups: Vec<GroupState>,
}

impl AdamW {
    pub fn new(store: &ParamStore, cfg: OptimConfig) -> Result<Self> {
        cfg.validate()?;
        let groups = [ParamGroup::Main, ParamGroup::Lambda]
            .into_iter()
            .map(|group| {
                let members: Vec<ParamId> = store.iter().filter(|(_, p)| p.group == group).map(|(id, _)| id).collect();
                let zeros = |id: &ParamId| vec![0.0; store.get(*id).value.numel()];
                GroupState {
                    group,
                    m: members.iter().map(zeros).collect(),
                    v: members.iter().map(zeros).collect(),
                    members,
                    step: 0,
                }
            })
            .collect();
        Ok(Self { cfg, groups })
    }

    /// Clips, decays, updates, then clears gradients. Missing gradients count
    /// as zeros.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<StepStats> {
        let mut sq = 0.0;
        for (_, p) in store.iter() {
            if let Some(g) = &p.grad {
                if let Some(i) = g.iter().position(|x| !x.is_finite()) {
                    return Err(Error::NonFinite {
                        path: format!("{}.grad[{i}]", p.name),
                    });
                }
                sq += g.iter().map(|x| x * x).sum::<f64>();
            }
        }
        let norm = sq.sqrt();
        let max = self.cfg.max_grad_norm;
        let scale = if max > 0.0 && max.is_finite() && norm > max { max / norm } else { 1.0 };
        let c = &self.cfg;
        for gs in &mut self.groups {
            gs.step += 1;
            let wd = c.weight_decay(gs.group);
            let bc1 = 1.0 - c.beta1.powi(gs.step as i32);
            let bc2 = 1.0 - c.beta2.powi(gs.step as i32);
            for (k, &id) in gs.members.iter().enumerate() {
                let p = store.get_mut(id);
                let grad = p.grad.take();
                let (m, v) = (&mut gs.m[k], &mut gs.v[k]);
                for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                    let g = grad.as_ref().map_or(0.0, |g| g[j] * scale);
                    if wd != 0.0 {
                        *w *= 1.0 - c.learning_rate * wd;
                    }
                    m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
                    v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
                    let mhat = m[j] / bc1;
                    let vhat = v[j] / bc2;
                    *w -= c.learning_rate * mhat / (vhat.sqrt() + c.eps);
                }
            }
        }
        store.zero_grad();
        Ok(StepStats {
            grad_norm: norm,
            clipped_norm: norm * scale,
        })
    }
}

/// One optimizer step over gradients already accumulated in `store`.
pub fn adamw_step(opt: &mut AdamW, store: &mut ParamStore) -> Result<StepStats> {
    opt.step(store)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaRecord {
    pub layer: usize,
    pub component: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub lambdas: Vec<LambdaRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean cross-entropy of the initialized model on the training set.
    pub initial_loss: f64,
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were retained.
    pub best_epoch: usize,
    pub best_val_acc: f64,
}

impl TrainReport {
    /// One JSON record per epoch.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl()?.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

fn snapshot_records(model: &ClassifierModel) -> Vec<LambdaRecord> {
    model
        .lambda_snapshot()
        .into_iter()
        .map(|(layer, component, value)| LambdaRecord { layer, component, value })
        .collect()
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

/// Accuracy and mean cross-entropy in inference mode.
pub fn evaluate_loss_acc(model: &ClassifierModel, data: &Dataset, batch_size: usize) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::Config("cannot evaluate on an empty dataset".into()));
    }
    let (mut loss, mut correct) = (0.0, 0usize);
    for b in make_batches(data, batch_size, model.config.max_seq_len, None) {
        let logits = predict_logits(model, &b.ids, &b.mask)?;
        let c = logits.shape()[1];
        for (row, &y) in logits.data().chunks(c).zip(&b.labels) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
            loss += lse - row[y];
            correct += usize::from(argmax(row) == y);
        }
    }
    let n = data.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

fn check_labels(data: &Dataset, n_classes: usize) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Config(format!("{:?} split is empty", data.split)));
    }
    if let Some(e) = data.examples.iter().find(|e| e.label >= n_classes) {
        return Err(Error::Config(format!("label {} outside 0..{n_classes}", e.label)));
    }
    Ok(())
}

/// Seeded mini-batch training with per-epoch validation. The parameters of
/// the epoch with the best validation accuracy (earliest on ties) are
/// restored before returning.
pub fn train(model: &mut ClassifierModel, train_set: &Dataset, val_set: &Dataset, cfg: &OptimConfig) -> Result<TrainReport> {
    train_with(model, train_set, val_set, cfg, |_| {})
}

/// [`train`] with a callback invoked after every epoch.
pub fn train_with(
    model: &mut ClassifierModel,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &OptimConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainReport> {
    let n_classes = model.config.n_classes;
    check_labels(train_set, n_classes)?;
    check_labels(val_set, n_classes)?;
    let mut opt = AdamW::new(&model.params, cfg.clone())?;
    let (initial_loss, _) = evaluate_loss_acc(model, train_set, cfg.batch_size)?;
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, ParamStore)> = None;
    for epoch in 1..=cfg.epochs {
        let shuffle_seed = cfg.seed.wrapping_mul(1_000_003).wrapping_add(epoch as u64);
        let batches = make_batches(train_set, cfg.batch_size, model.config.max_seq_len, Some(shuffle_seed));
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (bi, batch) in batches.iter().enumerate() {
            let grads = {
                let mut g = Graph::new(&model.params);
                let logits = model.logits(&mut g, &batch.ids, &batch.mask, ForwardMode::Train(&mut dropout_rng))?;
                let loss = g.cross_entropy(logits, &batch.labels)?;
                let lv = g.scalar_value(loss);
                if !lv.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        batch: bi,
                        loss: lv,
                    });
                }
                loss_sum += lv * batch.labels.len() as f64;
                let z = g.value(logits);
                correct += z
                    .chunks(n_classes)
                    .zip(&batch.labels)
                    .filter(|(row, &y)| argmax(row) == y)
                    .count();
                g.backward(loss)?
            };
            grads.accumulate_into(&mut model.params);
            opt.step(&mut model.params)?;
            model.project_coefficients();
        }
        let (_, val_acc) = evaluate_loss_acc(model, val_set, cfg.batch_size)?;
        let rec = EpochRecord {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            train_acc: correct as f64 / train_set.len() as f64,
            val_acc,
            lambdas: snapshot_records(model),
        };
        on_epoch(&rec);
        records.push(rec);
        if best.as_ref().is_none_or(|(_, acc, _)| val_acc > *acc) {
            best = Some((epoch, val_acc, model.params.clone()));
        }
    }
    let (best_epoch, best_val_acc) = match best {
        Some((e, acc, params)) => {
            model.params = params;
            (e, acc)
        }
        None => (0, f64::NAN),
    };
    Ok(TrainReport {
        initial_loss,
        epochs: records,
        best_epoch,
        best_val_acc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn scalar_store(group: ParamGroup, v: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::scalar(v), group);
        (s, id)
    }

    #[test]
    fn pure_decay_main_group() {
        let cfg = OptimConfig::default();
        let (mut s, id) = scalar_store(ParamGroup::Main, 0.7);
        let mut opt = AdamW::new(&s, cfg.clone()).unwrap();
        let mut expect = 0.7;
        for _ in 0..5 {
            opt.step(&mut s).unwrap();
            expect *= 1.0 - cfg.learning_rate * 0.1;
            assert_eq!(s.value(id).data()[0], expect);
        }
    }

    #[test]
    fn lambda_group_untouched_without_gradient() {
        let (mut s, id) = scalar_store(ParamGroup::Lambda, 0.123);
        let mut opt = AdamW::new(&s, OptimConfig::default()).unwrap();
        for _ in 0..50 {
            opt.step(&mut s).unwrap();
        }
        assert_eq!(s.value(id).data()[0].to_bits(), 0.123f64.to_bits());
    }

    #[test]
    fn scalar_recurrence_matches_hand_iteration() {
        let cfg = OptimConfig {
            max_grad_norm: 0.0,
            ..OptimConfig::default()
        };
        let (mut s, id) = scalar_store(ParamGroup::Main, 0.5);
        let mut opt = AdamW::new(&s, cfg.clone()).unwrap();
        let (mut w, mut m, mut v) = (0.5f64, 0.0f64, 0.0f64);
        for t in 1..=3 {
            s.get_mut(id).grad = Some(vec![1.0]);
            opt.step(&mut s).unwrap();
            w *= 1.0 - 3e-4 * 0.1;
            m = 0.9 * m + 0.1;
            v = 0.999 * v + 0.001;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            w -= 3e-4 * mh / (vh.sqrt() + 1e-8);
            assert!((s.value(id).data()[0] - w).abs() < 1e-12);
        }
        assert!(s.get(id).grad.is_none());
    }

    #[test]
    fn clipping_bounds_the_global_norm() {
        let mut s = ParamStore::new();
        let a = s.add("a", Tensor::vector(vec![0.0; 3]), ParamGroup::Main);
        let b = s.add("b", Tensor::vector(vec![0.0; 2]), ParamGroup::Lambda);
        s.get_mut(a).grad = Some(vec![3.0, -4.0, 12.0]);
        s.get_mut(b).grad = Some(vec![5.0, 0.5]);
        let mut opt = AdamW::new(&s, OptimConfig::default()).unwrap();
        let st = opt.step(&mut s).unwrap();
        assert!(st.grad_norm > 1.0);
        assert!(st.clipped_norm <= 1.0 + 1e-9);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let (mut s, id) = scalar_store(ParamGroup::Main, 1.0);
        s.get_mut(id).grad = Some(vec![f64::NAN]);
        let mut opt = AdamW::new(&s, OptimConfig::default()).unwrap();
        let err = opt.step(&mut s).unwrap_err().to_string();
        assert!(err.contains("w.grad[0]"), "{err}");
    }

    #[test]
    fn init_is_deterministic_and_normal_std_holds() {
        let mut s = ParamStore::new();
        s.declare("lam", &[100_000], ParamGroup::Lambda, Init::Normal { std: 0.02 });
        s.declare("w", &[8, 4], ParamGroup::Main, Init::XavierUniform);
        let mut t = s.clone();
        init_store(&mut s, 11);
        init_store(&mut t, 11);
        let bits = |s: &ParamStore| s.iter().flat_map(|(_, p)| p.value.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>()).collect::<Vec<_>>();
        assert_eq!(bits(&s), bits(&t));
        let x = s.value(ParamId(0)).data();
        let mean = x.iter().sum::<f64>() / x.len() as f64;
        let std = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (x.len() - 1) as f64).sqrt();
        assert!((std - 0.02).abs() < 0.001, "{std}");
        let b = xavier_bound(&[8, 4]);
        assert!(s.value(ParamId(1)).data().iter().all(|v| v.abs() <= b));
    }

    #[test]
    fn xavier_bound_formula() {
        let d = 64usize;
        assert_eq!(xavier_bound(&[d, d / 2]), (6.0 / (d as f64 + d as f64 / 2.0)).sqrt());
    }

    #[test]
    fn config_validation() {
        assert!(OptimConfig {
            learning_rate: 0.0,
            ..OptimConfig::default()
        }
        .validate()
        .is_err());
        assert!(OptimConfig {
            weight_decay_main: -0.1,
            ..OptimConfig::default()
        }
        .validate()
        .is_err());
    }
}
