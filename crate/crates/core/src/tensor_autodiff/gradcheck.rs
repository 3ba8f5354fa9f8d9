//! Central finite differences, used as the reference for every backward rule.

use super::tensor::Tensor;

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-3;
/// Default tolerance on [`relative_error`].
pub const FD_TOLERANCE: f64 = 1e-4;

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate of `x`.
pub fn fd_gradient_oracle(f: impl Fn(&Tensor) -> f64, x: &Tensor, step: f64) -> Tensor {
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - step;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        grad.push((plus - minus) / (2.0 * step));
    }
    Tensor::new(x.shape().to_vec(), grad).expect("same shape as x")
}

/// `|a - n| / max(1, |a|)`, largest over all coordinates. Any NaN makes the
/// result infinite.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient lengths differ");
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(1.0))
        .map(|e| if e.is_nan() { f64::INFINITY } else { e })
        .fold(0.0, f64::max)
}
