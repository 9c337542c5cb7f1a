//! Central-difference gradient checking in double precision.

/// Compares the analytic gradient of `f` at `x` against central differences.
///
/// `f` returns the scalar value and its analytic gradient. The result is the
/// maximum over coordinates of `|numeric - analytic| / max(1, |analytic|)`.
pub fn finite_diff_check<F>(mut f: F, x: &[f64], eps: f64) -> f64
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let (_, analytic) = f(x);
    assert_eq!(analytic.len(), x.len(), "gradient length");
    let mut probe = x.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let (plus, _) = f(&probe);
        probe[i] = x[i] - eps;
        let (minus, _) = f(&probe);
        probe[i] = x[i];
        let numeric = (plus - minus) / (2.0 * eps);
        let err = (numeric - analytic[i]).abs() / analytic[i].abs().max(1.0);
        worst = worst.max(err);
    }
    worst
}

/// Checks only the listed coordinates; used for large parameter vectors.
pub fn finite_diff_check_at<F>(mut f: F, x: &[f64], coords: &[usize], eps: f64) -> f64
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let (_, analytic) = f(x);
    let mut probe = x.to_vec();
    let mut worst = 0.0f64;
    for &i in coords {
        probe[i] = x[i] + eps;
        let (plus, _) = f(&probe);
        probe[i] = x[i] - eps;
        let (minus, _) = f(&probe);
        probe[i] = x[i];
        let numeric = (plus - minus) / (2.0 * eps);
        worst = worst.max((numeric - analytic[i]).abs() / analytic[i].abs().max(1.0));
    }
    worst
}
