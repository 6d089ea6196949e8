//! Reverse-mode differentiation over [`Tensor`]s, restricted to the handful
//! of primitives the reference networks need, plus the central-difference
//! oracle every gradient test is checked against.

pub mod kernels;
mod tape;

pub use tape::{BatchNormState, Gradients, Tape, Var};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Central finite-difference gradient of a scalar function:
/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate `i`.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Oracle(format!("step h must be positive, got {h}")));
    }
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !(plus.is_finite() && minus.is_finite()) {
            return Err(Error::Oracle(format!(
                "f is not finite around coordinate {i}"
            )));
        }
        grad.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

/// Largest coordinate-wise deviation between two gradients, relative to the
/// larger of their max-abs magnitudes. Two all-zero gradients agree exactly.
pub fn max_rel_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    let scale = analytic.max_abs().max(numeric.max_abs());
    let worst = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    if worst == 0.0 {
        0.0
    } else {
        worst / scale
    }
}
