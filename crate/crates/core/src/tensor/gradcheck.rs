//! Central finite-difference verification of backward rules.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of [`gradient_check`].
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// `max_i |analytic_i - central_i| / max(1, |analytic_i|)`.
    pub max_rel_error: f32,
    /// Coordinate attaining `max_rel_error`.
    pub worst_index: usize,
    /// Some coordinate's one-sided differences disagree, i.e. the point sits
    /// on a kink and the central difference is not a derivative there.
    pub non_smooth: bool,
}

fn eval<F>(f: &F, point: &Tensor) -> Result<f64>
where
    F: for<'t> Fn(Var<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let y = f(tape.constant(point.clone()))?;
    let v = y.value();
    if v.len() != 1 {
        return Err(Error::shape(format!(
            "gradient_check needs a scalar function, got {:?}",
            v.shape()
        )));
    }
    let v = v.item();
    if !v.is_finite() {
        return Err(Error::numeric("gradient_check evaluation"));
    }
    Ok(v as f64)
}

/// Compares the tape gradient of scalar `f` at `point` against central
/// differences with step `step`.
pub fn gradient_check<F>(f: F, point: &Tensor, step: f32) -> Result<GradCheck>
where
    F: for<'t> Fn(Var<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let x = tape.variable(point.clone());
    let y = f(x)?;
    if !y.value().is_finite() {
        return Err(Error::numeric("gradient_check evaluation"));
    }
    tape.backward(y)?;
    let analytic = x.grad().unwrap_or_else(|| Tensor::zeros(point.shape()));

    let f0 = eval(&f, point)?;
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst_index: 0,
        non_smooth: false,
    };
    let mut probe = point.clone();
    for i in 0..point.len() {
        let orig = point.data()[i];
        let hi = orig + step;
        let lo = orig - step;
        probe.data_mut()[i] = hi;
        let f_hi = eval(&f, &probe)?;
        probe.data_mut()[i] = lo;
        let f_lo = eval(&f, &probe)?;
        probe.data_mut()[i] = orig;

        // Use the actually representable step so rounding of orig +/- step
        // does not bias the quotient.
        let (h_hi, h_lo) = ((hi - orig) as f64, (orig - lo) as f64);
        let central = (f_hi - f_lo) / (h_hi + h_lo);
        let forward = (f_hi - f0) / h_hi;
        let backward = (f0 - f_lo) / h_lo;
        if (forward - backward).abs() > 1e-2 * central.abs().max(1.0) {
            report.non_smooth = true;
        }
        let a = analytic.data()[i] as f64;
        let err = ((a - central).abs() / a.abs().max(1.0)) as f32;
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_index = i;
        }
    }
    Ok(report)
}
