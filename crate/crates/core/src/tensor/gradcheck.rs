use super::{Graph, Tensor, Var};
use crate::error::{contract, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(1, |analytic|, |numeric|)` over all elements.
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub passed: bool,
}

/// Checks the tape gradient of a scalar function against central differences.
///
/// The error per element is relative to `max(1, |a|, |n|)`, so tiny
/// gradients are compared absolutely; 32-bit forward passes cannot resolve
/// relative error on near-zero derivatives at practical step sizes.
pub fn grad_check<S, F>(f: F, x: &Tensor<S>, step: f64, tol: f64) -> Result<GradCheckReport>
where
    S: Scalar,
    F: Fn(&mut Graph<S>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let root = f(&mut g, xv)?;
    if g.value(root).len() != 1 {
        return Err(contract(format!("grad_check: function returned shape {:?}, not a scalar", g.value(root).shape())));
    }
    g.backward(root)?;
    let analytic = match g.grad(xv) {
        Some(t) => t.to_f64_vec(),
        None => vec![0.0; x.len()],
    };
    let eval = |t: &Tensor<S>| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(t.clone());
        let r = f(&mut g, v)?;
        Ok(g.value(r).item().to_acc())
    };
    compare_gradients(eval, &analytic, x, step, tol)
}

/// Compares a supplied analytic gradient with central differences of `value`.
pub fn compare_gradients<S: Scalar>(
    value: impl Fn(&Tensor<S>) -> Result<f64>,
    analytic: &[f64],
    x: &Tensor<S>,
    step: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    let mut numeric = Vec::with_capacity(x.len());
    let mut probe = x.clone();
    for k in 0..x.len() {
        let orig = x.data()[k];
        probe.data_mut()[k] = S::from_acc(orig.to_acc() + step);
        let hi_x = probe.data()[k].to_acc();
        let hi = value(&probe)?;
        probe.data_mut()[k] = S::from_acc(orig.to_acc() - step);
        let lo_x = probe.data()[k].to_acc();
        let lo = value(&probe)?;
        probe.data_mut()[k] = orig;
        // divide by the realized step, which differs from `2*step` after rounding
        numeric.push((hi - lo) / (hi_x - lo_x));
    }
    let (mut worst, mut worst_index) = (0.0f64, 0usize);
    for (k, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let err = (a - n).abs() / a.abs().max(n.abs()).max(1.0);
        if err > worst || err.is_nan() {
            worst = if err.is_nan() { f64::INFINITY } else { err };
            worst_index = k;
        }
    }
    Ok(GradCheckReport {
        max_rel_error: worst,
        worst_index,
        analytic: analytic.to_vec(),
        numeric,
        passed: worst <= tol,
    })
}
