//! Finite-difference gradient verification in 64-bit check mode.

/// Central-difference step.
pub const FD_STEP: f64 = 1e-4;
/// Step for whole-model checks: with thousands of ReLUs in the path, a ±1e-4 stencil crosses
/// activation kinks and the difference quotient picks up an O(h) error.
pub const MODEL_FD_STEP: f64 = 1e-6;
/// Accepted relative error between analytic and numeric gradients.
pub const REL_TOL: f64 = 1e-3;
/// Magnitudes below this are compared absolutely; relative error of two
/// near-zero derivatives is otherwise dominated by truncation noise.
pub const REL_FLOOR: f64 = 1e-4;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// `(f(x+h) − f(x−h)) / 2h` for a scalar function of one perturbed coordinate.
pub fn central_difference(f: impl FnMut(f64) -> f64, at: f64) -> f64 {
    central_difference_with(f, at, FD_STEP)
}

pub fn central_difference_with(mut f: impl FnMut(f64) -> f64, at: f64, step: f64) -> f64 {
    (f(at + step) - f(at - step)) / (2.0 * step)
}
