//! Central-difference verification of analytic gradients.

use crate::error::{Result, TensorError};
use crate::matrix::Matrix;
use crate::params::ParamStore;
use crate::trace::{Trace, Var};

/// Relative error used throughout: `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub coordinates_checked: usize,
    /// Worst relative error per parameter, in store order.
    pub per_param: Vec<(String, f64)>,
    /// `(parameter, flat index, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn group_max(&self, prefix: &str) -> f64 {
        self.per_param
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, e)| *e)
            .fold(0.0, f64::max)
    }
}

fn eval<F>(store: &ParamStore, loss_fn: &mut F) -> Result<f64>
where
    F: FnMut(&ParamStore, &mut Trace) -> Result<Var>,
{
    let mut trace = Trace::new();
    let loss = loss_fn(store, &mut trace)?;
    let v = trace.scalar(loss);
    if !v.is_finite() {
        return Err(TensorError::NonFinite(format!("loss evaluated to {v}")));
    }
    Ok(v)
}

fn sample_indices(len: usize, limit: Option<usize>) -> Vec<usize> {
    match limit {
        Some(k) if k < len => {
            let stride = len as f64 / k as f64;
            (0..k).map(|i| (i as f64 * stride) as usize).collect()
        }
        _ => (0..len).collect(),
    }
}

/// Compares the analytic gradient of `loss_fn` with central differences of
/// step `step` over every (or up to `per_param_limit` evenly spaced)
/// coordinates of the parameters in `store`. `loss_fn` must be
/// deterministic. Pinned rows and non-trainable parameters are skipped.
/// Gradients are left zeroed on return.
pub fn finite_difference_check<F>(
    store: &mut ParamStore,
    step: f64,
    per_param_limit: Option<usize>,
    loss_fn: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore, &mut Trace) -> Result<Var>,
{
    finite_difference_check_with(store, step, Stencil::Central, per_param_limit, loss_fn)
}

/// Difference quotient used by [`finite_difference_check_with`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Stencil {
    /// `(f(x+h) - f(x-h)) / 2h`, error O(h^2).
    #[default]
    Central,
    /// `(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h`, error O(h^4).
    /// Allows a larger step, which keeps roundoff small when the loss is
    /// large relative to the gradient.
    FivePoint,
}

/// [`finite_difference_check`] with an explicit stencil.
pub fn finite_difference_check_with<F>(
    store: &mut ParamStore,
    step: f64,
    stencil: Stencil,
    per_param_limit: Option<usize>,
    mut loss_fn: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore, &mut Trace) -> Result<Var>,
{
    store.zero_grad();
    let mut trace = Trace::new();
    let loss = loss_fn(store, &mut trace)?;
    if !trace.scalar(loss).is_finite() {
        return Err(TensorError::NonFinite("loss".into()));
    }
    trace.backward(loss)?;
    trace.accumulate_into(store);
    let analytic: Vec<Vec<f64>> = store.iter().map(|(_, p)| p.tensor.grad.clone()).collect();
    store.zero_grad();

    let mut report = GradCheckReport::default();
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for (pi, id) in ids.into_iter().enumerate() {
        let (name, cols, pinned, trainable, len) = {
            let p = store.param(id);
            (
                p.name.clone(),
                p.tensor.values.cols(),
                p.pinned_row,
                p.trainable,
                p.tensor.values.data.len(),
            )
        };
        if !trainable {
            continue;
        }
        let mut worst_here: f64 = 0.0;
        for idx in sample_indices(len, per_param_limit) {
            if pinned == Some(idx / cols) {
                continue;
            }
            let orig = store.value(id).data[idx];
            let mut at = |offset: f64, store: &mut ParamStore| {
                store.value_mut(id).data[idx] = orig + offset;
                let v = eval(store, &mut loss_fn);
                store.value_mut(id).data[idx] = orig;
                v
            };
            let numeric = match stencil {
                Stencil::Central => (at(step, store)? - at(-step, store)?) / (2.0 * step),
                Stencil::FivePoint => {
                    let (p2, p1) = (at(2.0 * step, store)?, at(step, store)?);
                    let (m1, m2) = (at(-step, store)?, at(-2.0 * step, store)?);
                    (-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * step)
                }
            };
            let a = analytic[pi][idx];
            let err = relative_error(a, numeric);
            report.coordinates_checked += 1;
            worst_here = worst_here.max(err);
            if report.worst.is_none() || err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst = Some((name.clone(), idx, a, numeric));
            }
        }
        report.per_param.push((name, worst_here));
    }
    Ok(report)
}

/// Gradient check with respect to a free input matrix rather than a store.
/// Returns the maximum relative error over all coordinates.
pub fn check_input_gradient<F>(input: &Matrix, step: f64, mut f: F) -> Result<f64>
where
    F: FnMut(&mut Trace, Var) -> Result<Var>,
{
    let mut trace = Trace::new();
    let x = trace.variable(input.clone());
    let out = f(&mut trace, x)?;
    trace.backward(out)?;
    let analytic = trace
        .grad(x)
        .map(|g| g.to_vec())
        .unwrap_or_else(|| vec![0.0; input.data.len()]);
    let mut eval_at = |m: Matrix| -> Result<f64> {
        let mut t = Trace::new();
        let x = t.variable(m);
        let out = f(&mut t, x)?;
        let v = t.scalar(out);
        if !v.is_finite() {
            return Err(TensorError::NonFinite(format!("output {v}")));
        }
        Ok(v)
    };
    let mut worst: f64 = 0.0;
    for idx in 0..input.data.len() {
        let mut plus = input.clone();
        plus.data[idx] += step;
        let mut minus = input.clone();
        minus.data[idx] -= step;
        let numeric = (eval_at(plus)? - eval_at(minus)?) / (2.0 * step);
        worst = worst.max(relative_error(analytic[idx], numeric));
    }
    Ok(worst)
}
