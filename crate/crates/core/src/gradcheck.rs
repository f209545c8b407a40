//! Central-difference gradient checking against the autograd pass.
//!
//! The numeric side differentiates whatever the closure actually computes,
//! so any disagreement beyond finite-difference noise is a real bug in a
//! vector-Jacobian product.

use crate::dtype::Scalar;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default step for 64-bit checks: truncation and roundoff error are both
/// comfortably below the tolerances used in the test suites.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Relative-error denominators are floored here so near-zero gradients are
/// judged by absolute error instead. Some parameters have exactly-zero
/// gradients by construction (a convolution bias feeding a train-mode batch
/// norm, for one), where central differences still leave ~1e-10 of roundoff
/// noise; the floor keeps that noise from registering as relative error
/// while still flagging any wrong gradient of real magnitude.
pub const REL_FLOOR: f64 = 1e-4;

/// Gradient of a scalar-valued function at `x`, by central differences,
/// one element at a time: (f(x+h) - f(x-h)) / 2h.
pub fn finite_diff_grad<T, F>(mut f: F, x: &Tensor<T>, h: T) -> Result<Tensor<T>>
where
    T: Scalar,
    F: FnMut(&Tensor<T>) -> Result<Tensor<T>>,
{
    let mut grad = vec![T::zero(); x.numel()];
    for i in 0..x.numel() {
        let mut xp = x.detach();
        xp.data_mut()[i] = xp.data()[i] + h;
        let fp = eval_scalar(&mut f, &xp)?;
        let mut xm = x.detach();
        xm.data_mut()[i] = xm.data()[i] - h;
        let fm = eval_scalar(&mut f, &xm)?;
        grad[i] = (fp - fm) / (h + h);
    }
    Tensor::from_vec(grad, x.shape())
}

fn eval_scalar<T, F>(f: &mut F, x: &Tensor<T>) -> Result<T>
where
    T: Scalar,
    F: FnMut(&Tensor<T>) -> Result<Tensor<T>>,
{
    let out = f(x)?;
    if out.numel() != 1 {
        return Err(Error::Autograd(format!(
            "finite differences need a scalar objective, got shape {:?}",
            out.shape()
        )));
    }
    out.item()
}

/// Worst-case agreement between an analytic and a numeric gradient.
#[derive(Debug, Clone, Copy)]
pub struct GradAgreement {
    pub checked: usize,
    pub max_abs: f64,
    pub max_rel: f64,
    pub worst_index: usize,
}

impl GradAgreement {
    pub fn within(&self, rel_tol: f64) -> bool {
        self.max_rel <= rel_tol
    }
}

/// Compare element by element; relative error uses
/// max(|analytic|, |numeric|, REL_FLOOR) as denominator.
pub fn compare_grads<T: Scalar>(analytic: &[T], numeric: &[T]) -> GradAgreement {
    assert_eq!(analytic.len(), numeric.len(), "gradient lengths differ");
    let mut agg = GradAgreement { checked: analytic.len(), max_abs: 0.0, max_rel: 0.0, worst_index: 0 };
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        let a = a.as_f64();
        let n = n.as_f64();
        let abs = (a - n).abs();
        let rel = abs / a.abs().max(n.abs()).max(REL_FLOOR);
        if abs > agg.max_abs {
            agg.max_abs = abs;
        }
        if rel > agg.max_rel {
            agg.max_rel = rel;
            agg.worst_index = i;
        }
    }
    agg
}
