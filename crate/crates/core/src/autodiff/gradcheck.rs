//! Central finite-difference verification of autodiff gradients.

use super::graph::{Graph, Var};
use crate::error::{FocalError, Result};
use crate::tensor::{Scalar, Tensor};

/// `|a - n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Max relative error over paired gradient entries.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

/// `(f(+h) - f(-h)) / 2h` for a scalar function of a perturbation.
pub fn central_difference(mut f: impl FnMut(f64) -> f64, h: f64) -> f64 {
    (f(h) - f(-h)) / (2.0 * h)
}

/// Checks the gradient of a scalar-valued `f` at `x` element by element and
/// returns the max relative error.
pub fn grad_check<T, F>(f: F, x: &Tensor<T>, h: f64) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    let all: Vec<usize> = (0..x.numel()).collect();
    grad_check_at(f, x, h, &all)
}

/// Like [`grad_check`] but only over the listed element indices.
pub fn grad_check_at<T, F>(f: F, x: &Tensor<T>, h: f64, indices: &[usize]) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    let mut leaf = x.clone();
    leaf.set_requires_grad(true);
    let mut g = Graph::new();
    let xv = g.param(&leaf);
    let loss = f(&mut g, xv)?;
    if g.value(loss).len() != 1 {
        return Err(FocalError::Usage(
            "grad_check needs a scalar-valued function".into(),
        ));
    }
    g.backward(loss)?;
    let analytic: Vec<f64> = match g.grad(xv) {
        Some(gr) => indices.iter().map(|&i| gr[i].as_f64()).collect(),
        None => vec![0.0; indices.len()],
    };

    let mut numeric = Vec::with_capacity(indices.len());
    for &i in indices {
        let eval = |delta: f64| -> Result<f64> {
            let mut p = x.clone();
            p.set_requires_grad(false);
            let v = p.data()[i];
            p.data_mut()[i] = T::of(v.as_f64() + delta);
            let mut g = Graph::new();
            let pv = g.param(&p);
            let out = f(&mut g, pv)?;
            Ok(g.scalar_value(out).as_f64())
        };
        let plus = eval(h)?;
        let minus = eval(-h)?;
        numeric.push((plus - minus) / (2.0 * h));
    }
    Ok(max_relative_error(&analytic, &numeric))
}
