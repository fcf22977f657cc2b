//! Finite-difference gradient checking used by the test suites.

use ndarray::{ArrayD, IxDyn};

use super::{Param, Tensor};

/// Compare analytic gradients of `f` w.r.t. each input against central
/// finite differences. `f` must rebuild its graph from the given leaves.
///
/// The comparison is relative: `|a - n| / max(|a|, |n|, 1) < rel_tol`.
pub fn gradcheck<F>(inputs: &[Tensor], f: F, rel_tol: f64)
where
    F: Fn(&[Tensor]) -> Tensor,
{
    let loss = f(inputs);
    assert_eq!(loss.len(), 1, "gradcheck needs a scalar loss");
    let grads = loss.backward();
    let eps = 1e-5;
    for (which, input) in inputs.iter().enumerate() {
        let analytic = grads
            .wrt(input)
            .cloned()
            .unwrap_or_else(|| ArrayD::zeros(IxDyn(input.shape())));
        let base: Vec<f64> = input.data().iter().cloned().collect();
        let shape = input.shape().to_vec();
        for flat in 0..base.len() {
            let eval = |delta: f64| {
                let mut vals = base.clone();
                vals[flat] += delta;
                let perturbed =
                    Tensor::variable(ArrayD::from_shape_vec(IxDyn(&shape), vals).unwrap());
                let replaced: Vec<Tensor> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| if j == which { perturbed.clone() } else { t.clone() })
                    .collect();
                f(&replaced).item()
            };
            let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
            let a = analytic.iter().nth(flat).cloned().unwrap();
            let denom = a.abs().max(numeric.abs()).max(1.0);
            assert!(
                (a - numeric).abs() / denom < rel_tol,
                "gradcheck: input {which}, flat index {flat}: analytic {a} vs numeric {numeric}"
            );
        }
    }
}

/// Gradient check for module parameters: `f` rebuilds the loss by reading
/// the current parameter values, so perturbing a [`Param`] in place and
/// re-evaluating yields the numeric derivative.
///
/// Checks at most `max_coords` coordinates per parameter (deterministically
/// strided) to keep whole-module checks fast.
pub fn gradcheck_params<F>(params: &[Param], f: F, rel_tol: f64, max_coords: usize)
where
    F: Fn() -> Tensor,
{
    let loss = f();
    assert_eq!(loss.len(), 1, "gradcheck needs a scalar loss");
    let grads = loss.backward();
    let eps = 1e-5;
    for (which, param) in params.iter().enumerate() {
        let analytic: Vec<f64> = match grads.get(param.id()) {
            Some(g) => g.iter().cloned().collect(),
            None => vec![0.0; param.value().len()],
        };
        let base: Vec<f64> = param.value().iter().cloned().collect();
        let shape = param.shape();
        let n = base.len();
        let stride = (n / max_coords.max(1)).max(1);
        for flat in (0..n).step_by(stride) {
            let eval = |delta: f64| {
                let mut vals = base.clone();
                vals[flat] += delta;
                param.set(ArrayD::from_shape_vec(IxDyn(&shape), vals).unwrap());
                f().item()
            };
            let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
            param.set(ArrayD::from_shape_vec(IxDyn(&shape), base.clone()).unwrap());
            let a = analytic[flat];
            let denom = a.abs().max(numeric.abs()).max(1.0);
            assert!(
                (a - numeric).abs() / denom < rel_tol,
                "gradcheck: param {which}, flat index {flat}: analytic {a} vs numeric {numeric}"
            );
        }
    }
}
