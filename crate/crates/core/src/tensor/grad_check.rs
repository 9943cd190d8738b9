//! Central-finite-difference verification of analytic gradients.
//!
//! The harness takes one evaluation closure that can run in two modes: value
//! only, or value plus analytic gradients. It compares the analytic gradient
//! of every parameter element against `(f(θ+h) − f(θ−h)) / 2h` and returns the
//! worst relative error `|analytic − numeric| / max(1, |numeric|)`.

use rayon::prelude::*;

use crate::error::TensorError;
use crate::scalar::Scalar;
use crate::tensor::params::{GradientRecord, Params};

/// Evaluates `f` at `θ` (with gradients) and at ±h per element (value only);
/// returns the max relative error over all parameter elements.
///
/// `eval(params, want_grads)` must be a pure function of `params`.
pub fn grad_check<T, F>(eval: F, params: &Params<T>, h: T) -> Result<T, TensorError>
where
    T: Scalar,
    F: Fn(&Params<T>, bool) -> Result<(T, Option<GradientRecord<T>>), TensorError> + Sync,
{
    if h <= T::zero() {
        return Err(TensorError::invalid("grad_check", "h must be positive"));
    }
    let (f0, grads) = eval(params, true)?;
    if !f0.is_finite() {
        return Err(TensorError::NonFinite { op: "grad_check" });
    }
    let grads = grads.ok_or_else(|| {
        TensorError::invalid("grad_check", "eval returned no gradients in gradient mode")
    })?;

    let names: Vec<&str> = params.names().collect();
    let worst = names
        .par_iter()
        .map(|name| -> Result<T, TensorError> {
            let shape = params.expect(name).shape();
            let mut local = params.clone();
            let mut worst = T::zero();
            for i in 0..shape.0 {
                for j in 0..shape.1 {
                    let orig = local.expect(name).get(i, j);
                    local.get_mut(name).set(i, j, orig + h);
                    let (fp, _) = eval(&local, false)?;
                    local.get_mut(name).set(i, j, orig - h);
                    let (fm, _) = eval(&local, false)?;
                    local.get_mut(name).set(i, j, orig);
                    if !(fp.is_finite() && fm.is_finite()) {
                        return Err(TensorError::NonFinite { op: "grad_check" });
                    }
                    let numeric = (fp - fm) / (h + h);
                    let analytic = grads.get(name).map_or(T::zero(), |g| g.get(i, j));
                    let rel = (analytic - numeric).abs() / T::one().max(numeric.abs());
                    worst = worst.max(rel);
                }
            }
            Ok(worst)
        })
        .try_reduce(T::zero, |a, b| Ok(a.max(b)))?;
    Ok(worst)
}
