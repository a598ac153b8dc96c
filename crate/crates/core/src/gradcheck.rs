//! Central-difference gradient checker used as a test oracle.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::NdArray;

/// Coordinates whose analytic and numeric derivatives differ by less than
/// this are treated as agreeing. Central differences in `f64` carry roundoff
/// around `1e-16 * |f| / step`, which would otherwise dominate the relative
/// error of derivatives that are exactly or nearly zero.
pub const NOISE_FLOOR: f64 = 1e-8;

/// Builds a scalar from a single parameter on a fresh tape.
pub trait ScalarFn: Fn(&mut Tape, Var) -> Result<Var> {}
impl<F: Fn(&mut Tape, Var) -> Result<Var>> ScalarFn for F {}

fn evaluate(f: &impl ScalarFn, x: &NdArray) -> Result<f64> {
    let mut tape = Tape::new();
    let v = tape.param(x.clone())?;
    let out = f(&mut tape, v)?;
    let value = tape.value(out);
    if !value.is_scalar() {
        return Err(Error::NonScalarRoot(value.shape().to_vec()));
    }
    let y = value.item();
    if !y.is_finite() {
        return Err(Error::NonFinite("finite_diff_check"));
    }
    Ok(y)
}

/// Analytic gradient of `f` at `x` via the tape.
pub fn analytic_gradient(f: &impl ScalarFn, x: &NdArray) -> Result<NdArray> {
    let mut tape = Tape::new();
    let v = tape.param(x.clone())?;
    let out = f(&mut tape, v)?;
    Ok(tape.backward(out)?.wrt(v))
}

/// Central-difference gradient of `f` at `x`.
pub fn numeric_gradient(f: &impl ScalarFn, x: &NdArray, step: f64) -> Result<NdArray> {
    let mut grad = NdArray::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = evaluate(f, &probe)?;
        probe.data_mut()[i] = orig - step;
        let down = evaluate(f, &probe)?;
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * step);
    }
    Ok(grad)
}

/// Max over coordinates of `|analytic − numeric| / (|analytic| + 1e-12)`,
/// counting coordinates within [`NOISE_FLOOR`] as exact.
pub fn finite_diff_check(f: impl ScalarFn, x: &NdArray, step: f64) -> Result<f64> {
    if !(step > 0.0 && step <= 1e-3) {
        return Err(Error::invalid(format!("finite-difference step {} outside (0, 1e-3]", step)));
    }
    let analytic = analytic_gradient(&f, x)?;
    let numeric = numeric_gradient(&f, x, step)?;
    Ok(max_relative_error(&analytic, &numeric))
}

pub fn max_relative_error(analytic: &NdArray, numeric: &NdArray) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| {
            let diff = (a - n).abs();
            if diff <= NOISE_FLOOR {
                0.0
            } else {
                diff / (a.abs() + 1e-12)
            }
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let x = NdArray::row_vector(vec![1.0, 2.0]);
        let err = finite_diff_check(
            |t: &mut Tape, v| {
                let s = t.square(v)?;
                t.sum(s)
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-8, "{}", err);
    }

    #[test]
    fn rejects_bad_step() {
        let x = NdArray::scalar(1.0);
        assert!(finite_diff_check(|t: &mut Tape, v| t.sum(v), &x, 0.1).is_err());
        assert!(finite_diff_check(|t: &mut Tape, v| t.sum(v), &x, 0.0).is_err());
    }

    #[test]
    fn non_finite_probe_is_error() {
        let x = NdArray::scalar(0.0);
        assert!(finite_diff_check(
            |t: &mut Tape, v| {
                let l = t.ln(v)?;
                t.sum(l)
            },
            &x,
            1e-6
        )
        .is_err());
    }
}
