use super::Matrix;

/// Denominator floor for relative gradient errors.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// Central-difference gradient of `loss` at `params`, one entry at a time:
/// `(loss(p + eps e_i) - loss(p - eps e_i)) / (2 eps)`.
pub fn finite_diff_grad<F>(mut loss: F, params: &Matrix, eps: f64) -> Matrix
where
    F: FnMut(&Matrix) -> f64,
{
    debug_assert!(
        (1e-7..=1e-3).contains(&eps),
        "eps {eps} outside [1e-7, 1e-3]"
    );
    let mut probe = params.clone();
    let mut grad = Matrix::zeros(params.rows(), params.cols());
    for i in 0..params.data().len() {
        let orig = params.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = loss(&probe);
        probe.data_mut()[i] = orig - eps;
        let down = loss(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * eps);
    }
    grad
}

/// Largest elementwise `|analytic - numeric| / max(|analytic|, 1e-6)`.
pub fn max_rel_err(analytic: &Matrix, numeric: &Matrix) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / a.abs().max(REL_ERR_FLOOR))
        .fold(0.0, f64::max)
}
