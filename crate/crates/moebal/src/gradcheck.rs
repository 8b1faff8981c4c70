//! Central finite-difference oracle for gradient verification.
//!
//! Works on any scalar function of a flat f64 vector, so it stays fully
//! independent of the tape: callers rebuild their forward pass from plain
//! buffers on every probe.

/// Central difference gradient: (f(x+h) - f(x-h)) / 2h per coordinate.
pub fn central_diff(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let fp = f(&probe);
        probe[i] = orig - h;
        let fm = f(&probe);
        probe[i] = orig;
        grad.push((fp - fm) / (2.0 * h));
    }
    grad
}

/// Relative error between two gradient estimates of one coordinate. The
/// denominator floor keeps near-zero gradients from inflating the ratio
/// past what FD roundoff can resolve.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-4)
}

/// Maximum per-coordinate relative error between two gradient vectors.
pub fn max_rel_err(got: &[f64], want: &[f64]) -> f64 {
    assert_eq!(got.len(), want.len(), "gradient length mismatch");
    got.iter()
        .zip(want.iter())
        .map(|(&a, &b)| rel_err(a, b))
        .fold(0.0, f64::max)
}
