//! Central finite-difference checking of tape gradients.
//!
//! The numeric side only ever evaluates the forward pass, so it is an
//! independent oracle for the backward rules.

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Step used for central differences.
pub const FD_STEP: f64 = 1e-5;

/// Relative error, with denominators floored at `1e-4` so that gradients
/// that are zero analytically do not divide by noise.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4)
}

#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Largest relative error over every checked coordinate.
    pub max_rel_error: f64,
    /// How many coordinates were compared.
    pub checked: usize,
    /// Label of the input (or parameter) holding the worst coordinate.
    pub worst: String,
}

/// Checks `f` with respect to free input tensors. `f` builds a scalar from
/// the leaves it is handed.
pub fn check_inputs<F>(inputs: &[Tensor], f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |ts: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut report = GradCheck {
        max_rel_error: 0.0,
        checked: 0,
        worst: String::new(),
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        for j in 0..inputs[k].len() {
            let orig = work[k].data()[j];
            work[k].data_mut()[j] = orig + FD_STEP;
            let up = eval(&work)?;
            work[k].data_mut()[j] = orig - FD_STEP;
            let down = eval(&work)?;
            work[k].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let e = relative_error(analytic[j], numeric);
            report.checked += 1;
            if e > report.max_rel_error {
                report.max_rel_error = e;
                report.worst = format!("input {k}[{j}]");
            }
        }
    }
    Ok(report)
}

/// Checks `f` with respect to every non-frozen parameter of `store`.
/// `stride` > 1 samples every `stride`-th coordinate of each parameter.
pub fn check_params<F>(store: &ParamStore, stride: usize, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let mut work = store.clone();
    let mut g = Graph::with_params(store, crate::autodiff::Mode::Eval);
    let out = f(&mut g)?;
    let grads = g.backward(out)?;

    let mut report = GradCheck {
        max_rel_error: 0.0,
        checked: 0,
        worst: String::new(),
    };
    for id in store.ids() {
        if store.is_frozen(id) {
            continue;
        }
        let analytic = grads
            .param(id)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; store.value(id).len()]);
        let mut j = 0;
        while j < store.value(id).len() {
            let orig = work.value(id).data()[j];
            work.value_mut(id).data_mut()[j] = orig + FD_STEP;
            let up = {
                let mut g = Graph::with_params(&work, crate::autodiff::Mode::Eval);
                let o = f(&mut g)?;
                g.value(o).item()
            };
            work.value_mut(id).data_mut()[j] = orig - FD_STEP;
            let down = {
                let mut g = Graph::with_params(&work, crate::autodiff::Mode::Eval);
                let o = f(&mut g)?;
                g.value(o).item()
            };
            work.value_mut(id).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let e = relative_error(analytic[j], numeric);
            report.checked += 1;
            if e > report.max_rel_error {
                report.max_rel_error = e;
                report.worst = format!("{}[{j}]", store.name(id));
            }
            j += stride.max(1);
        }
    }
    Ok(report)
}
