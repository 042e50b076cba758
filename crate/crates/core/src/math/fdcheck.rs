//! Central finite differences for gradient verification.
//!
//! Deliberately independent of [`crate::math::tape`]'s backward pass: the
//! functions here only ever call the forward evaluation the caller provides,
//! so they stay a valid oracle for it.

/// Default step for f64 central differences.
pub const FD_STEP: f64 = 1e-5;

/// Numeric gradient of `f` at `x` by central differences.
pub fn central_diff<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], h: f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    let mut out = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = xp[i];
        xp[i] = orig + h;
        let up = f(&xp);
        xp[i] = orig - h;
        let down = f(&xp);
        xp[i] = orig;
        out[i] = (up - down) / (2.0 * h);
    }
    out
}

/// Symmetric relative error with a small absolute floor so that matching
/// near-zero gradients do not blow up the ratio.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-6)
}

/// Largest elementwise [`rel_err`] between two gradient buffers.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max)
}
