//! Central finite-difference validation of analytic gradients.

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};

/// Agreement for one parameter tensor.
#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    /// `‖a − n‖ / max(1e-8, ‖a‖ + ‖n‖)` over the tensor's entries.
    pub rel_error: f64,
    pub analytic_norm: f64,
    pub max_abs_diff: f64,
}

/// Outcome of a gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest per-tensor relative error.
    pub max_rel_error: f64,
    pub params: Vec<ParamCheck>,
    /// Largest single-entry [`relative_error`]; noisy for entries whose true
    /// gradient is near zero.
    pub max_entry_rel_error: f64,
    /// Parameter name and flat index of that entry.
    pub worst_entry: Option<(String, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub entries_checked: usize,
}

impl GradCheckReport {
    pub fn worst_param(&self) -> Option<&ParamCheck> {
        self.params.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares backward-pass gradients of the scalar built by `f` against
/// central differences with step `eps`, over every entry of `params`.
/// Errors are aggregated per parameter tensor.
///
/// `f` must be deterministic; the store is restored bit-exactly afterwards.
pub fn finite_diff_check<F>(store: &mut ParamStore, params: &[ParamId], eps: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be > 0, got {eps}")));
    }
    let analytic: Vec<Vec<f64>> = {
        let mut g = Graph::new(store);
        let loss = f(&mut g)?;
        check_finite(g.value(loss), "loss")?;
        let grads = g.backward(loss)?;
        params
            .iter()
            .map(|&id| {
                grads
                    .param(id)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; store.value(id).numel()])
            })
            .collect()
    };

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(store);
        let loss = f(&mut g)?;
        Ok(g.scalar_value(loss))
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        params: Vec::with_capacity(params.len()),
        max_entry_rel_error: 0.0,
        worst_entry: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        entries_checked: 0,
    };
    for (pi, &id) in params.iter().enumerate() {
        let name = store.get(id).name.clone();
        check_finite(&analytic[pi], &name)?;
        let (mut diff_sq, mut a_sq, mut n_sq, mut max_abs) = (0.0, 0.0, 0.0, 0.0f64);
        for j in 0..store.value(id).numel() {
            let orig = store.value(id).data()[j];
            store.value_mut(id)[j] = orig + eps;
            let plus = eval(store);
            store.value_mut(id)[j] = orig - eps;
            let minus = eval(store);
            store.value_mut(id)[j] = orig;
            let numeric = (plus? - minus?) / (2.0 * eps);
            if !numeric.is_finite() {
                return Err(Error::NonFinite {
                    path: format!("{name}[{j}]"),
                });
            }
            let a = analytic[pi][j];
            diff_sq += (a - numeric) * (a - numeric);
            a_sq += a * a;
            n_sq += numeric * numeric;
            max_abs = max_abs.max((a - numeric).abs());
            let err = relative_error(a, numeric);
            report.entries_checked += 1;
            if err > report.max_entry_rel_error || report.worst_entry.is_none() {
                report.max_entry_rel_error = err;
                report.worst_entry = Some((name.clone(), j));
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
        let rel = diff_sq.sqrt() / (a_sq.sqrt() + n_sq.sqrt()).max(1e-8);
        report.max_rel_error = report.max_rel_error.max(rel);
        report.params.push(ParamCheck {
            name,
            rel_error: rel,
            analytic_norm: a_sq.sqrt(),
            max_abs_diff: max_abs,
        });
    }
    Ok(report)
}

fn check_finite(values: &[f64], path: &str) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::NonFinite {
            path: format!("{path}[{i}]"),
        }),
        None => Ok(()),
    }
}
