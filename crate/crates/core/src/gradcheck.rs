//! Central finite-difference oracle for checking analytic gradients.
//!
//! Only forward evaluations are used here, so the oracle stays independent of
//! the backward rules it checks.

use crate::tensor::Array;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Central differences `(f(x+h·e_i) − f(x−h·e_i)) / 2h` for every coordinate.
pub fn numerical_gradient(f: impl Fn(&Array) -> f64, x: &Array, step: f64) -> Array {
    let mut probe = x.clone();
    let mut out = vec![0.0; x.len()];
    for (i, o) in out.iter_mut().enumerate() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = f(&probe);
        probe.data_mut()[i] = orig - step;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        *o = (up - down) / (2.0 * step);
    }
    Array::new(x.shape().to_vec(), out).expect("same shape as x")
}

/// Largest coordinate error relative to the larger of the two gradients'
/// infinity norms.
pub fn relative_error(analytic: &Array, numeric: &Array) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient lengths differ");
    let scale = analytic.max_abs().max(numeric.max_abs()).max(1e-8);
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max)
        / scale
}
