//! Central finite-difference gradient checking.
//!
//! The numerical side only ever evaluates forward values, so it stays
//! independent of every backward recipe it is used to validate.

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;

/// Floor on the relative-error denominator. Gradients whose magnitude is
/// below this are compared in absolute terms against the floor.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_err: f64,
    /// (input index, flat element index) of the worst mismatch.
    pub worst: Option<(usize, usize)>,
    pub analytic: Vec<Tensor<f64>>,
    pub numeric: Vec<Tensor<f64>>,
}

/// `|a - n| / max(|a|, |n|, REL_FLOOR)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn eval_scalar<F>(inputs: &[Tensor<f64>], f: &F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.value(out).item()
}

/// Gradient of the scalar built by `f` with respect to each input, by central differences.
pub fn numerical_grad<F>(inputs: &[Tensor<f64>], eps: f64, f: &F) -> Result<Vec<Tensor<f64>>>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut grads = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut gi = vec![0.0; inputs[i].len()];
        for (e, slot) in gi.iter_mut().enumerate() {
            let orig = inputs[i].data()[e];
            work[i].data_mut()[e] = orig + eps;
            let plus = eval_scalar(&work, f)?;
            work[i].data_mut()[e] = orig - eps;
            let minus = eval_scalar(&work, f)?;
            work[i].data_mut()[e] = orig;
            *slot = (plus - minus) / (2.0 * eps);
        }
        grads.push(Tensor::new(inputs[i].shape().to_vec(), gi)?);
    }
    Ok(grads)
}

/// Compares backward-pass gradients with central differences.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], eps: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    let numeric = numerical_grad(inputs, eps, &f)?;

    let mut max_rel_err = 0.0;
    let mut worst = None;
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        if a.shape() != n.shape() {
            return Err(Error::shape("check_gradients", a.shape(), n.shape()));
        }
        for (e, (&av, &nv)) in a.data().iter().zip(n.data()).enumerate() {
            let err = relative_error(av, nv);
            if err > max_rel_err || err.is_nan() {
                max_rel_err = err;
                worst = Some((i, e));
            }
        }
    }
    Ok(GradCheck {
        max_rel_err,
        worst,
        analytic,
        numeric,
    })
}
