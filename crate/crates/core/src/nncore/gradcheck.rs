//! Central finite-difference check of reverse-mode gradients.

use crate::error::{Error, Result};
use crate::nncore::graph::{Graph, Var};
use crate::nncore::tensor::Tensor;

/// Denominator floor for the per-coordinate relative error.
pub const REL_ERR_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub max_rel_err: f64,
    /// `(input index, flat coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub coords_checked: usize,
    pub tol: f64,
    pub pass: bool,
}

/// Coordinates to probe: all of them, or `limit` evenly spaced ones.
fn probe_coords(n: usize, limit: Option<usize>) -> Vec<usize> {
    match limit {
        Some(l) if l < n => (0..l).map(|i| i * n / l).collect(),
        _ => (0..n).collect(),
    }
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), false)).collect();
    let out = f(&mut g, &vars)?;
    let out = if g.value(out).numel() == 1 { out } else { g.sum_all(out) };
    let v = g.value(out).item();
    if !v.is_finite() {
        return Err(Error::NonFinite("grad-check objective".into()));
    }
    Ok(v)
}

/// Compare analytic gradients of `sum(f(inputs))` against central differences.
///
/// Relative error per coordinate is `|a - n| / max(|a|, |n|, REL_ERR_FLOOR)`.
/// `max_coords` caps the probed coordinates per input.
pub fn grad_check<F>(
    f: F,
    inputs: &[Tensor<f64>],
    eps: f64,
    tol: f64,
    max_coords: Option<usize>,
) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::Config("finite-difference step must be positive".into()));
    }
    if inputs.iter().any(|t| !t.all_finite()) {
        return Err(Error::NonFinite("grad-check input".into()));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &vars)?;
    let out = if g.value(out).numel() == 1 { out } else { g.sum_all(out) };
    if !g.value(out).all_finite() {
        return Err(Error::NonFinite("grad-check objective".into()));
    }
    let mut grads = g.backward(out);
    let mut report = GradReport {
        max_rel_err: 0.0,
        worst: None,
        coords_checked: 0,
        tol,
        pass: true,
    };
    let mut probe = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads
            .take(*v)
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        for c in probe_coords(inputs[i].numel(), max_coords) {
            let orig = inputs[i].data()[c];
            probe[i].data_mut()[c] = orig + eps;
            let plus = evaluate(&f, &probe)?;
            probe[i].data_mut()[c] = orig - eps;
            let minus = evaluate(&f, &probe)?;
            probe[i].data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.data()[c];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
            report.coords_checked += 1;
            if report.worst.is_none() || rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((i, c));
            }
        }
    }
    report.pass = report.max_rel_err <= tol;
    Ok(report)
}
