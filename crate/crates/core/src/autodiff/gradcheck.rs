//! Central finite-difference verification of analytic gradients.

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Default finite-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Denominator floor of the relative error, so that gradients that are zero
/// analytically and numerically do not divide by zero.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// `(input, element)` of the worst relative error.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    /// Elements whose central stencil crossed an activation kink and were
    /// checked with a one-sided second-order stencil instead.
    pub one_sided: usize,
    /// Elements with a kink within one step on both sides; not checked.
    pub skipped: usize,
    pub tol: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares `analytic[i]` against central differences of `value_fn` at
/// `inputs[i]`, element by element.
pub fn check_gradients<F>(value_fn: F, analytic: &[Tensor<f64>], inputs: &[Tensor<f64>], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor<f64>]) -> Result<f64>,
{
    check_piecewise(|xs| Ok((value_fn(xs)?, Vec::new())), analytic, inputs, h, tol)
}

/// Like [`check_gradients`], for a function that is smooth on pieces
/// labelled by `value_fn`'s second output. A central stencil that leaves the
/// piece of the base point is replaced by the one-sided stencil
/// `(-3 f(x) + 4 f(x + h) - f(x + 2h)) / 2h` on a side that stays in it.
/// When neither side does, the element is skipped and counted; more than 1%
/// skipped fails the check.
pub fn check_piecewise<F>(value_fn: F, analytic: &[Tensor<f64>], inputs: &[Tensor<f64>], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor<f64>]) -> Result<(f64, Vec<bool>)>,
{
    if analytic.len() != inputs.len() {
        return Err(Error::param("one analytic gradient per input required"));
    }
    if !(h > 0.0) {
        return Err(Error::param("finite-difference step must be positive"));
    }
    let (f0, piece) = value_fn(inputs)?;
    let mut work = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: None,
        checked: 0,
        one_sided: 0,
        skipped: 0,
        tol,
        passed: true,
    };
    for i in 0..inputs.len() {
        if analytic[i].shape() != inputs[i].shape() {
            return Err(Error::param(format!(
                "gradient {i} has shape {:?}, input {:?}",
                analytic[i].shape(),
                inputs[i].shape()
            )));
        }
        for j in 0..inputs[i].numel() {
            let x0 = inputs[i].data()[j];
            let mut at = |dx: f64| -> Result<(f64, bool)> {
                work[i].data_mut()[j] = x0 + dx;
                let (v, p) = value_fn(&work)?;
                work[i].data_mut()[j] = x0;
                Ok((v, p == piece))
            };
            let (fp, same_p) = at(h)?;
            let (fm, same_m) = at(-h)?;
            let numeric = if same_p && same_m {
                (fp - fm) / (2.0 * h)
            } else {
                let mut one_sided = None;
                for (dir, f1, same) in [(1.0, fp, same_p), (-1.0, fm, same_m)] {
                    if !same {
                        continue;
                    }
                    let (f2, same2) = at(2.0 * dir * h)?;
                    if same2 {
                        one_sided = Some(dir * (-3.0 * f0 + 4.0 * f1 - f2) / (2.0 * h));
                        break;
                    }
                }
                match one_sided {
                    Some(v) => {
                        report.one_sided += 1;
                        v
                    }
                    None => {
                        report.skipped += 1;
                        continue;
                    }
                }
            };
            let a = analytic[i].data()[j];
            if !numeric.is_finite() || !a.is_finite() {
                return Err(Error::Numeric {
                    op: "finite_difference",
                    node: i,
                });
            }
            let rel = relative_error(a, numeric);
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((i, j));
            }
            report.checked += 1;
        }
    }
    report.passed = report.max_rel_error <= tol && report.skipped * 100 <= report.checked + report.skipped;
    Ok(report)
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>], trainable: bool) -> Result<(Graph<f64>, Vec<Var>, Var)>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    g.set_check_finite(true);
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), trainable)).collect();
    let out = f(&mut g, &vars)?;
    g.ensure_finite()?;
    if g.value(out).numel() != 1 {
        return Err(Error::param("grad_check needs a scalar-valued function"));
    }
    Ok((g, vars, out))
}

/// Builds `f` on a fresh tape, differentiates it and checks every input
/// element by central differences.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let (g, vars, out) = evaluate(&f, inputs, true)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.wrt(v, t.shape()))
        .collect();
    check_piecewise(
        |xs| {
            let (g, _, out) = evaluate(&f, xs, false)?;
            Ok((g.value(out).item(), g.activation_pattern()))
        },
        &analytic,
        inputs,
        h,
        tol,
    )
}
