//! Central finite differences, the reference that every analytic gradient
//! in this crate is checked against.

use crate::autograd::{Graph, Var};
use crate::error::{AhanError, Result};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;

/// Denominator floor of [`relative_error`]; below it the comparison is
/// effectively absolute.
pub const REL_ERR_FLOOR: f64 = 1e-3;

/// `(f(x + eps·eᵢ) − f(x − eps·eᵢ)) / 2eps` for every coordinate `i`.
pub fn finite_diff_grad<F>(f: F, x: &Tensor, eps: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(AhanError::invalid("finite_diff_grad", format!("eps must be > 0, got {eps}")));
    }
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / (2.0 * eps);
    }
    Ok(grad)
}

/// `|a − b| / max(|a|, |b|, REL_ERR_FLOOR)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(input index, flat element index)` of the worst coordinate.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Compares backward-pass gradients of `build` against finite differences
/// for every element of every input.
///
/// `build` receives a fresh graph and one leaf per input and must return a
/// one-element loss.
pub fn check_gradients<F>(inputs: &[Tensor], eps: f64, build: F) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    let mut coords = Vec::new();
    for (k, t) in inputs.iter().enumerate() {
        coords.extend((0..t.numel()).map(|i| (k, i)));
    }
    check_gradients_at(inputs, eps, &coords, build)
}

/// Like [`check_gradients`], restricted to the listed `(input, element)`
/// coordinates.
pub fn check_gradients_at<F>(
    inputs: &[Tensor],
    eps: f64,
    coords: &[(usize, usize)],
    build: F,
) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<Var<'_>> = values.iter().map(|t| g.leaf(t.clone())).collect();
        let loss = build(&g, &vars)?;
        let v = loss.value().item()?;
        Ok(v)
    };

    let analytic: Vec<Tensor> = {
        let g = Graph::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let loss = build(&g, &vars)?;
        let grads = g.backward(loss)?;
        vars.iter().map(|v| grads.wrt(*v)).collect()
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for &(k, i) in coords {
        let orig = inputs[k].data()[i];
        probe[k].data_mut()[i] = orig + eps;
        let plus = eval(&probe)?;
        probe[k].data_mut()[i] = orig - eps;
        let minus = eval(&probe)?;
        probe[k].data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic[k].data()[i];
        let err = relative_error(a, numeric);
        report.checked += 1;
        if err > report.max_rel_err || report.checked == 1 {
            report.max_rel_err = err;
            report.worst = (k, i);
            report.analytic = a;
            report.numeric = numeric;
        }
    }
    Ok(report)
}
