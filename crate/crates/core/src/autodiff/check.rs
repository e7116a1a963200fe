//! Finite-difference verification harness for the backward rules.

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Compares the tape gradient of a scalar-valued function against central
/// finite differences, coordinate by coordinate, and returns the maximum
/// relative error `|a - n| / max(1e-8, |a| + |n|)`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f32) -> Result<f32>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::InvalidArgument("finite difference eps must be positive".into()));
    }

    let analytic = {
        let mut tape = Tape::new();
        let v = tape.param(x.clone());
        let root = f(&mut tape, v)?;
        if tape.value(root).len() != 1 {
            return Err(Error::InvalidArgument("finite_diff_check needs a scalar output".into()));
        }
        let grads = tape.backward(root)?;
        grads.get(v).expect("parameter gradient present").clone()
    };

    let eval = |x: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.param(x.clone());
        let root = f(&mut tape, v)?;
        Ok(tape.value(root).data()[0] as f64)
    };

    let mut max_err = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let fp = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let fm = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (fp - fm) / (2.0 * eps as f64);
        let a = analytic.data()[i] as f64;
        let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
        max_err = max_err.max(err);
    }
    Ok(max_err as f32)
}
