//! Finite-difference helpers used by the gradient tests.

/// Step used for central differences at 64-bit precision.
pub const FD_STEP: f64 = 1e-5;

/// `(f(x + h) - f(x - h)) / 2h`.
pub fn central_difference(mut f: impl FnMut(f64) -> f64, x: f64) -> f64 {
    (f(x + FD_STEP) - f(x - FD_STEP)) / (2.0 * FD_STEP)
}

/// `|a - b| / max(|a|, |b|, floor)`; the floor keeps near-zero gradients from
/// turning round-off into huge relative errors.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(1e-6);
    (a - b).abs() / denom
}
