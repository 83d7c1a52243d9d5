//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates forward passes on constant
//! leaves, so it is independent of every backward rule it checks.

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Worst relative error over all checked inputs.
    pub max_rel_err: f64,
    /// Per input: `max |analytic − numeric| / max(‖analytic‖∞, ‖numeric‖∞, 1e-10)`.
    pub per_input: Vec<f64>,
}

/// Compares autodiff gradients of the scalar produced by `f` against
/// central differences for every element of every input.
pub fn check<F>(inputs: &[Tensor], step: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        g.value(out).item()
    };

    let mut per_input = Vec::with_capacity(inputs.len());
    let mut work = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[k])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        let mut numeric = vec![0.0; input.len()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let x0 = input.data()[i];
            work[k].data_mut()[i] = x0 + step;
            let up = eval(&work)?;
            work[k].data_mut()[i] = x0 - step;
            let down = eval(&work)?;
            work[k].data_mut()[i] = x0;
            *slot = (up - down) / (2.0 * step);
        }
        per_input.push(relative_error(analytic.data(), &numeric));
    }
    Ok(GradCheckReport {
        max_rel_err: per_input.iter().copied().fold(0.0, f64::max),
        per_input,
    })
}

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let inf = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    diff / inf(analytic).max(inf(numeric)).max(1e-10)
}
