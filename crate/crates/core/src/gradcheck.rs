//! Central finite-difference verification of tape gradients.

use alloc::vec::Vec;

use crate::error::{ensure, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Gradient magnitudes below this are compared absolutely rather than relatively.
pub const GRAD_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic − numeric| / max(|analytic|, |numeric|, GRAD_FLOOR)`.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// `(tensor, element)` where the relative error peaked.
    pub worst: (usize, usize),
    pub checked: usize,
    pub tol: f64,
    pub passed: bool,
}

/// Compares `analytic` gradients of `value` at `params` against central
/// differences with step `h`.
pub fn compare_with_finite_differences(
    params: &[Tensor],
    analytic: &[Tensor],
    h: f64,
    tol: f64,
    mut value: impl FnMut(&[Tensor]) -> Result<f64>,
) -> Result<GradCheckReport> {
    ensure!(h > 0.0, "finite-difference step must be positive");
    ensure!(params.len() == analytic.len(), "one analytic gradient per parameter tensor is required");
    let mut probe: Vec<Tensor> = params.to_vec();
    let mut report = GradCheckReport { max_rel_error: 0.0, max_abs_error: 0.0, worst: (0, 0), checked: 0, tol, passed: true };
    for (t, grad) in analytic.iter().enumerate() {
        ensure!(grad.shape() == params[t].shape(), "gradient {t} has the wrong shape");
        for i in 0..params[t].numel() {
            let base = params[t].data()[i];
            probe[t].data_mut()[i] = base + h;
            let up = value(&probe)?;
            probe[t].data_mut()[i] = base - h;
            let down = value(&probe)?;
            probe[t].data_mut()[i] = base;
            let numeric = (up - down) / (2.0 * h);
            let a = grad.data()[i];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(GRAD_FLOOR);
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (t, i);
            }
            report.checked += 1;
        }
    }
    report.passed = report.max_rel_error <= tol;
    Ok(report)
}

/// Checks a scalar function recorded by `f` over leaf tensors `params`.
pub fn finite_diff_check<F>(params: &[Tensor], h: f64, tol: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor]| -> Result<(Graph, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.leaf(p.clone())).collect();
        let out = f(&mut g, &vars)?;
        ensure!(g.value(out).is_scalar(), "checked function must return a scalar");
        Ok((g, vars, out))
    };
    let (g, vars, out) = eval(params)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(params)
        .map(|(v, p)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    compare_with_finite_differences(params, &analytic, h, tol, |ps| {
        let (g, _, out) = eval(ps)?;
        Ok(g.value(out).item())
    })
}
