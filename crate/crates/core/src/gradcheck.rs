//! Central-difference gradient checks.
//!
//! The check compares a tape gradient against `(f(x + h eᵢ) - f(x - h eᵢ)) / 2h`
//! for every coordinate and reports the largest relative error
//! `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Scalar function of one tensor, evaluable at either precision.
///
/// Implemented by test problems so an `f32` gradient can be checked
/// against finite differences taken in `f64`.
pub trait ScalarFn {
    fn eval<'t, T: Real>(&self, x: Var<'t, T>) -> Result<Var<'t, T>>;
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Coordinate holding the largest error.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

pub const REL_FLOOR: f64 = 1e-12;

/// Compares `analytic` against central differences of `value_at`.
pub fn compare_with_central_differences(
    value_at: impl Fn(&Tensor<f64>) -> Result<f64>,
    x: &Tensor<f64>,
    analytic: &Tensor<f64>,
    h: f64,
) -> Result<GradCheckReport> {
    compare_with_floor(value_at, x, analytic, h, REL_FLOOR)
}

/// As [`compare_with_central_differences`] with an explicit denominator floor.
pub fn compare_with_floor(
    value_at: impl Fn(&Tensor<f64>) -> Result<f64>,
    x: &Tensor<f64>,
    analytic: &Tensor<f64>,
    h: f64,
    floor: f64,
) -> Result<GradCheckReport> {
    if h.is_nan() || h <= 0.0 {
        return Err(Error::contract(format!("finite-difference step must be positive, got {h}")));
    }
    x.check_same_shape(analytic, "finite_diff_check")?;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    let base = x.to_vec();
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += h;
        let mut minus = base.clone();
        minus[i] -= h;
        let fp = value_at(&Tensor::new(x.shape().to_vec(), plus)?)?;
        let fm = value_at(&Tensor::new(x.shape().to_vec(), minus)?)?;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::numeric("finite_diff_check: f returned a non-finite value"));
        }
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic.data()[i];
        let denom = a.abs().max(numeric.abs()).max(floor);
        let err = (a - numeric).abs() / denom;
        if i == 0 || err > report.max_rel_error {
            report = GradCheckReport {
                max_rel_error: err,
                worst_index: i,
                analytic: a,
                numeric,
            };
        }
    }
    Ok(report)
}

/// Pins a closure to the higher-ranked signature the checks expect, which
/// inference does not pick for closures bound with `let`.
pub fn tape_fn<T, F>(f: F) -> F
where
    T: Real,
    F: for<'t> Fn(Var<'t, T>) -> Result<Var<'t, T>>,
{
    f
}

/// Tape gradient of a scalar function at `x`, plus its value.
pub fn tape_gradient<T, F>(f: F, x: &Tensor<T>) -> Result<(T, Tensor<T>)>
where
    T: Real,
    F: for<'t> Fn(Var<'t, T>) -> Result<Var<'t, T>>,
{
    let tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let loss = f(xv)?;
    let value = loss.value();
    if value.len() != 1 {
        return Err(Error::contract("gradient check needs a scalar function"));
    }
    let grads = tape.backward(loss)?;
    Ok((value.item(), grads.wrt(xv)))
}

/// Max relative error between the tape gradient of `f` and central
/// differences with step `h` (all in `f64`).
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    let (_, analytic) = tape_gradient(&f, x)?;
    let value_at = |p: &Tensor<f64>| -> Result<f64> {
        let tape = Tape::new();
        let v = f(tape.constant(p.clone()))?;
        Ok(v.value().item())
    };
    compare_with_central_differences(value_at, x, &analytic, h)
}

/// Checks the gradient of `f` evaluated at precision `T` against central
/// differences taken in `f64` at the same point.
pub fn finite_diff_check_at<T: Real>(f: &impl ScalarFn, x: &Tensor<f64>, h: f64) -> Result<GradCheckReport> {
    let xt: Tensor<T> = x.cast();
    let tape = Tape::<T>::new();
    let xv = tape.leaf(xt);
    let loss = f.eval(xv)?;
    let analytic: Tensor<f64> = tape.backward(loss)?.wrt(xv).cast();
    let value_at = |p: &Tensor<f64>| -> Result<f64> {
        let tape = Tape::<f64>::new();
        let v = f.eval(tape.constant(p.clone()))?;
        Ok(v.value().item())
    };
    compare_with_central_differences(value_at, x, &analytic, h)
}
