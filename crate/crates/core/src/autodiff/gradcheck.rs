//! Central-difference gradient oracle and comparison helpers.

use super::graph::{Graph, Var};
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_REL_TOL: f64 = 1e-4;
pub const DEFAULT_ABS_FLOOR: f64 = 1e-9;

/// `(f(x + eps e_k) - f(x - eps e_k)) / (2 eps)` for every coordinate `k`.
pub fn finite_difference_gradient<T: Scalar>(
    mut f: impl FnMut(&Tensor<T>) -> Result<T>,
    x: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    if eps <= T::zero() {
        return Err(Error::contract("finite-difference step must be positive"));
    }
    let mut probe = x.clone();
    let mut out = Tensor::zeros_like(x);
    let two_eps = eps + eps;
    for k in 0..x.len() {
        let orig = probe.data()[k];
        probe.data_mut()[k] = orig + eps;
        let plus = f(&probe)?;
        probe.data_mut()[k] = orig - eps;
        let minus = f(&probe)?;
        probe.data_mut()[k] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numerics(format!(
                "objective is not finite near coordinate {k}"
            )));
        }
        out.data_mut()[k] = (plus - minus) / two_eps;
    }
    Ok(out)
}

/// Worst per-element relative error between two gradients. Elements whose
/// absolute difference is at most `abs_floor` count as exact matches.
pub fn relative_error<T: Scalar>(analytic: &Tensor<T>, numeric: &Tensor<T>, abs_floor: f64) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| {
            let (a, n) = (a.as_f64(), n.as_f64());
            let diff = (a - n).abs();
            if diff <= abs_floor {
                0.0
            } else {
                diff / a.abs().max(n.abs())
            }
        })
        .fold(0.0, f64::max)
}

/// Compares backward against central differences for every parameter of
/// `store`. `build` must construct the same scalar objective each call.
/// Returns the worst relative error over all coordinates.
pub fn check_param_gradients<T, F>(store: &ParamStore<T>, eps: T, abs_floor: f64, mut build: F) -> Result<f64>
where
    T: Scalar,
    F: FnMut(&mut Graph<T>, &ParamStore<T>) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = build(&mut g, store)?;
    let analytic = g.backward(loss)?.for_params(&g, store);

    let mut worst = 0.0f64;
    let mut probe = store.clone();
    for id in store.ids() {
        let original = store.get(id).clone();
        let numeric = finite_difference_gradient(
            |t| {
                *probe.get_mut(id) = t.clone();
                let mut g = Graph::new();
                let loss = build(&mut g, &probe)?;
                Ok(g.value(loss).item())
            },
            &original,
            eps,
        )?;
        *probe.get_mut(id) = original;
        worst = worst.max(relative_error(&analytic[id.index()], &numeric, abs_floor));
    }
    Ok(worst)
}

/// Like [`check_param_gradients`] but for a single differentiable input tensor.
pub fn check_input_gradient<T, F>(x: &Tensor<T>, eps: T, abs_floor: f64, mut build: F) -> Result<f64>
where
    T: Scalar,
    F: FnMut(&mut Graph<T>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.variable(x.clone());
    let loss = build(&mut g, xv)?;
    let analytic = g.backward(loss)?.wrt(&g, xv);
    let numeric = finite_difference_gradient(
        |t| {
            let mut g = Graph::new();
            let xv = g.variable(t.clone());
            let loss = build(&mut g, xv)?;
            Ok(g.value(loss).item())
        },
        x,
        eps,
    )?;
    Ok(relative_error(&analytic, &numeric, abs_floor))
}
