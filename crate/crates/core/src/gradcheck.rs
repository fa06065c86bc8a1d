//! Finite-difference gradient oracle.
//!
//! Checks analytic reverse-mode gradients of a scalar-valued function against
//! central differences in f64. Used by the test suites to certify every
//! primitive and the full transformer blocks.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Max over coordinates of |analytic - central| / (|analytic| + |central| + 1e-12).
///
/// `f` must be a pure scalar-valued function of its input.
pub fn gradcheck<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&Var<f64>) -> Result<Var<f64>>,
{
    let leaf = Var::param(x.clone());
    let y = f(&leaf)?;
    if y.value().numel() != 1 {
        return Err(Error::invalid(format!(
            "gradcheck expects a scalar-valued function, got shape {:?}",
            y.shape()
        )));
    }
    if !y.value().all_finite() {
        return Err(Error::NonFinite("gradcheck f(x)"));
    }
    y.backward()?;
    let analytic = leaf
        .grad()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |t: &Tensor<f64>| -> Result<f64> {
        let v = f(&Var::constant(t.clone()))?;
        let y = v.value().item();
        if !y.is_finite() {
            return Err(Error::NonFinite("gradcheck probe"));
        }
        Ok(y)
    };

    let mut worst = 0.0f64;
    let base = x.to_vec();
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += eps;
        let mut minus = base.clone();
        minus[i] -= eps;
        let fp = eval(&Tensor::from_vec(x.shape(), plus)?)?;
        let fm = eval(&Tensor::from_vec(x.shape(), minus)?)?;
        let central = (fp - fm) / (2.0 * eps);
        let a = analytic.data()[i];
        let rel = (a - central).abs() / (a.abs() + central.abs() + 1e-12);
        if rel > worst {
            worst = rel;
        }
    }
    Ok(worst)
}
