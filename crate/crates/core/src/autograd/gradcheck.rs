//! Central finite-difference checks against tape gradients.

use crate::error::Result;
use crate::tensor::RealTensor;

use super::{Tape, Var};

/// Outcome of a gradient check.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

/// Compares the tape gradient of `f` at `x` against central differences
/// with step `h`. `f` records a scalar on the tape from the leaf it is given.
///
/// Returns the max over elements of
/// `|analytic − numeric| / (|analytic| + |numeric| + 1e-12)`.
pub fn finite_diff_check<F>(f: F, x: &RealTensor, h: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let leaf = tape.param(x.clone());
    let loss = f(&mut tape, leaf)?;
    tape.backward(loss)?;
    let analytic = tape.grad(leaf).expect("leaf requires grad");

    let eval = |probe: RealTensor| -> Result<f64> {
        let mut t = Tape::new();
        let l = t.constant(probe);
        let out = f(&mut t, l)?;
        Ok(t.value(out).data()[0])
    };

    let mut max_rel: f64 = 0.0;
    let mut max_abs: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = eval(probe.clone())?;
        probe.data_mut()[i] = orig - h;
        let fm = eval(probe.clone())?;
        probe.data_mut()[i] = orig;
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic.data()[i];
        let diff = (a - numeric).abs();
        max_abs = max_abs.max(diff);
        max_rel = max_rel.max(diff / (a.abs() + numeric.abs() + 1e-12));
    }
    Ok(GradCheck {
        max_rel_error: max_rel,
        max_abs_error: max_abs,
    })
}

/// Pushes every element of `x` at least `margin` away from zero, keeping its
/// sign, so piecewise-linear ops stay off their kinks.
pub fn away_from_zero(x: &RealTensor, margin: f64) -> RealTensor {
    x.map(|v| if v >= 0.0 { v + margin } else { v - margin })
}
