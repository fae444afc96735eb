//! Classification metrics, ROC/AUC, silhouette, evaluation artifacts and
//! inference timing.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{Batch, Dataset};
use crate::error::{Error, Result};
use crate::model::{delta_params_vs_vanilla, param_count, predict_logits, ClassifierModel, ForwardMode};
use crate::numerics::Graph;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub precision_macro: f64,
    pub recall_macro: f64,
    pub f1_macro: f64,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    /// `confusion[true][pred]`
    pub confusion: Vec<Vec<u64>>,
    /// Classes absent from both truth and predictions; they score 0.
    pub absent_classes: Vec<usize>,
}

fn safe_div(a: f64, b: f64) -> f64 {
    if b > 0.0 {
        a / b
    } else {
        0.0
    }
}

pub fn classification_metrics(y_true: &[usize], y_pred: &[usize], n_classes: usize) -> Result<ClassificationMetrics> {
    if y_true.len() != y_pred.len() {
        return Err(Error::Metric(format!(
            "length mismatch: {} labels vs {} predictions",
            y_true.len(),
            y_pred.len()
        )));
    }
    if y_true.is_empty() {
        return Err(Error::Metric("no examples".into()));
    }
    if let Some(&bad) = y_true.iter().chain(y_pred).find(|&&c| c >= n_classes) {
        return Err(Error::Metric(format!("class {bad} outside 0..{n_classes}")));
    }
    let mut confusion = vec![vec![0u64; n_classes]; n_classes];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        confusion[t][p] += 1;
    }
    let n = y_true.len() as f64;
    let mut precision = Vec::with_capacity(n_classes);
    let mut recall = Vec::with_capacity(n_classes);
    let mut f1 = Vec::with_capacity(n_classes);
    let mut absent_classes = Vec::new();
    for c in 0..n_classes {
        let tp = confusion[c][c] as f64;
        let predicted: u64 = (0..n_classes).map(|t| confusion[t][c]).sum();
        let actual: u64 = confusion[c].iter().sum();
        if predicted == 0 && actual == 0 {
            absent_classes.push(c);
        }
        let p = safe_div(tp, predicted as f64);
        let r = safe_div(tp, actual as f64);
        precision.push(p);
        recall.push(r);
        f1.push(safe_div(2.0 * p * r, p + r));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / n_classes as f64;
    let trace: u64 = (0..n_classes).map(|c| confusion[c][c]).sum();
    Ok(ClassificationMetrics {
        accuracy: trace as f64 / n,
        precision_macro: mean(&precision),
        recall_macro: mean(&recall),
        f1_macro: mean(&f1),
        precision,
        recall,
        f1,
        confusion,
        absent_classes,
    })
}

/// One ROC vertex of a one-vs-rest curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub class: usize,
    pub fpr: f64,
    pub tpr: f64,
}

/// Rank-statistic AUC: the probability a random positive outscores a random
/// negative, ties counting one half.
pub fn binary_auc(positive: &[bool], scores: &[f64]) -> Result<f64> {
    if positive.len() != scores.len() {
        return Err(Error::Metric("labels and scores differ in length".into()));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Metric("AUC is undefined when the truth contains a single class".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg_rank * order[i..=j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// ROC vertices from the strictest threshold down, tied scores merged.
pub fn roc_curve(positive: &[bool], scores: &[f64]) -> Vec<(f64, f64)> {
    let n_pos = positive.iter().filter(|&&p| p).count() as f64;
    let n_neg = positive.len() as f64 - n_pos;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut pts = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if positive[order[i]] {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        pts.push((safe_div(fp, n_neg), safe_div(tp, n_pos)));
    }
    pts
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocResult {
    pub auc: f64,
    /// One-vs-rest AUC per class; `None` where the class is absent from truth.
    pub per_class_auc: Vec<Option<f64>>,
    pub roc_points: Vec<RocPoint>,
}

/// `scores` is row-major `n × n_classes` (e.g. softmax probabilities).
/// Binary AUC uses the class-1 column; multiclass AUC is the macro mean of
/// one-vs-rest AUCs over classes present in the truth.
pub fn roc_auc(y_true: &[usize], scores: &[f64], n_classes: usize) -> Result<RocResult> {
    if n_classes < 2 || scores.len() != y_true.len() * n_classes {
        return Err(Error::Metric(format!(
            "expected {} × {n_classes} scores, got {}",
            y_true.len(),
            scores.len()
        )));
    }
    let mut distinct: Vec<usize> = y_true.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::Metric("AUC is undefined when the truth contains a single class".into()));
    }
    let mut per_class_auc = Vec::with_capacity(n_classes);
    let mut roc_points = Vec::new();
    for c in 0..n_classes {
        let pos: Vec<bool> = y_true.iter().map(|&y| y == c).collect();
        let col: Vec<f64> = scores.chunks(n_classes).map(|r| r[c]).collect();
        per_class_auc.push(binary_auc(&pos, &col).ok());
        if pos.iter().any(|&p| p) && pos.iter().any(|&p| !p) {
            roc_points.extend(roc_curve(&pos, &col).into_iter().map(|(fpr, tpr)| RocPoint { class: c, fpr, tpr }));
        }
    }
    let auc = if n_classes == 2 {
        per_class_auc[1].expect("both classes present")
    } else {
        let defined: Vec<f64> = per_class_auc.iter().flatten().copied().collect();
        defined.iter().sum::<f64>() / defined.len() as f64
    };
    Ok(RocResult {
        auc,
        per_class_auc,
        roc_points,
    })
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean silhouette coefficient of row-major `embeddings` (`n × dim`) under
/// Euclidean distance; members of singleton clusters score 0.
pub fn silhouette(embeddings: &[f64], dim: usize, labels: &[usize]) -> Result<f64> {
    if dim == 0 || embeddings.len() != labels.len() * dim {
        return Err(Error::Metric(format!(
            "{} values do not form {} rows of width {dim}",
            embeddings.len(),
            labels.len()
        )));
    }
    let n_labels = labels.iter().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; n_labels];
    labels.iter().for_each(|&l| sizes[l] += 1);
    if sizes.iter().filter(|&&s| s > 0).count() < 2 {
        return Err(Error::Metric("silhouette needs at least two populated classes".into()));
    }
    let row = |i: usize| &embeddings[i * dim..(i + 1) * dim];
    let n = labels.len();
    let mut total = 0.0;
    let mut sums = vec![0.0; n_labels];
    for i in 0..n {
        if sizes[labels[i]] == 1 {
            continue;
        }
        sums.iter_mut().for_each(|s| *s = 0.0);
        for j in 0..n {
            if j != i {
                sums[labels[j]] += euclid(row(i), row(j));
            }
        }
        let a = sums[labels[i]] / (sizes[labels[i]] - 1) as f64;
        let b = (0..n_labels)
            .filter(|&c| c != labels[i] && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        total += if m > 0.0 { (b - a) / m } else { 0.0 };
    }
    Ok(total / n as f64)
}

/// Wall-clock inference cost per batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub mean_ms_per_batch: f64,
    /// Coefficient of variation across repeats.
    pub cv: f64,
    pub repeats: usize,
}

/// Runs one warm-up pass, then `repeats` timed passes over `batches` in
/// fixed order.
pub fn time_inference(model: &ClassifierModel, batches: &[Batch], repeats: usize) -> Result<Timing> {
    if batches.is_empty() {
        return Err(Error::Metric("no batches to time".into()));
    }
    if repeats < 3 {
        return Err(Error::Metric(format!("timing needs at least 3 repeats, got {repeats}")));
    }
    let pass = || -> Result<f64> {
        let t = Instant::now();
        for b in batches {
            std::hint::black_box(predict_logits(model, &b.ids, &b.mask)?);
        }
        Ok(t.elapsed().as_secs_f64() * 1e3 / batches.len() as f64)
    };
    pass()?;
    let samples = (0..repeats).map(|_| pass()).collect::<Result<Vec<f64>>>()?;
    Ok(timing_from_samples(&samples))
}

pub fn timing_from_samples(samples: &[f64]) -> Timing {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    Timing {
        mean_ms_per_batch: mean,
        cv: safe_div(var.sqrt(), mean),
        repeats: samples.len(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub n_examples: usize,
    pub n_classes: usize,
    pub accuracy: f64,
    pub precision_macro: f64,
    pub recall_macro: f64,
    pub f1_macro: f64,
    pub auc: f64,
    pub silhouette: f64,
    pub confusion: Vec<Vec<u64>>,
    pub absent_classes: Vec<usize>,
    pub roc_points: Vec<RocPoint>,
    pub params_total: usize,
    pub delta_params_vs_vanilla: i64,
    pub inference_ms_per_batch: f64,
    pub inference_cv: f64,
}

/// Everything produced by one evaluation pass.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub result: EvalResult,
    /// Pooled representations, row-major `n × d_model`, in dataset order.
    pub embeddings: Vec<f64>,
    pub labels: Vec<usize>,
    pub probabilities: Vec<f64>,
}

/// Predictions, metrics, embeddings and timing over `data` in order.
/// AUC falls back to NaN when the truth holds a single class.
pub fn evaluate(model: &ClassifierModel, data: &Dataset, batch_size: usize, timing_repeats: usize) -> Result<Evaluation> {
    let c = model.config.n_classes;
    let batches = crate::data::make_batches(data, batch_size, model.config.max_seq_len, None);
    let mut embeddings = Vec::with_capacity(data.len() * model.config.d_model);
    let mut probabilities = Vec::with_capacity(data.len() * c);
    let mut preds = Vec::with_capacity(data.len());
    for b in &batches {
        let mut g = Graph::new(&model.params);
        let pooled = model.pooled(&mut g, &b.ids, &b.mask, ForwardMode::Eval)?;
        let w = g.param(model.head_weight);
        let bias = g.param(model.head_bias);
        let z = g.matmul(pooled, w)?;
        let z = g.add_row(z, bias)?;
        embeddings.extend_from_slice(g.value(pooled));
        for row in g.value(z).chunks(c) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            probabilities.extend(e.iter().map(|v| v / s));
            let arg = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0;
            preds.push(arg);
        }
    }
    let labels = data.labels();
    let cm = classification_metrics(&labels, &preds, c)?;
    let (auc, roc_points) = match roc_auc(&labels, &probabilities, c) {
        Ok(r) => (r.auc, r.roc_points),
        Err(_) => (f64::NAN, Vec::new()),
    };
    let sil = silhouette(&embeddings, model.config.d_model, &labels).unwrap_or(f64::NAN);
    let timing = time_inference(model, &batches, timing_repeats.max(3))?;
    Ok(Evaluation {
        result: EvalResult {
            n_examples: data.len(),
            n_classes: c,
            accuracy: cm.accuracy,
            precision_macro: cm.precision_macro,
            recall_macro: cm.recall_macro,
            f1_macro: cm.f1_macro,
            auc,
            silhouette: sil,
            confusion: cm.confusion,
            absent_classes: cm.absent_classes,
            roc_points,
            params_total: param_count(model).total,
            delta_params_vs_vanilla: delta_params_vs_vanilla(model)?,
            inference_ms_per_batch: timing.mean_ms_per_batch,
            inference_cv: timing.cv,
        },
        embeddings,
        labels,
        probabilities,
    })
}

fn write(path: &Path, s: &str) -> Result<()> {
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn write_eval_json(path: &Path, r: &EvalResult) -> Result<()> {
    write(path, &(serde_json::to_string_pretty(r)? + "\n"))
}

/// Rows are true classes, columns predicted classes.
pub fn write_confusion_csv(path: &Path, confusion: &[Vec<u64>]) -> Result<()> {
    let mut s = String::from("true");
    (0..confusion.len()).for_each(|c| write!(s, ",pred_{c}").unwrap());
    s.push('\n');
    for (t, row) in confusion.iter().enumerate() {
        write!(s, "{t}").unwrap();
        row.iter().for_each(|v| write!(s, ",{v}").unwrap());
        s.push('\n');
    }
    write(path, &s)
}

pub fn write_roc_csv(path: &Path, points: &[RocPoint]) -> Result<()> {
    let mut s = String::from("class,fpr,tpr\n");
    for p in points {
        writeln!(s, "{},{},{}", p.class, p.fpr, p.tpr).unwrap();
    }
    write(path, &s)
}

/// `dim` tab-separated values followed by the label, one row per example.
pub fn write_embeddings_tsv(path: &Path, embeddings: &[f64], dim: usize, labels: &[usize]) -> Result<()> {
    let mut s = String::new();
    for (row, l) in embeddings.chunks(dim).zip(labels) {
        for v in row {
            write!(s, "{v}\t").unwrap();
        }
        writeln!(s, "{l}").unwrap();
    }
    write(path, &s)
}
