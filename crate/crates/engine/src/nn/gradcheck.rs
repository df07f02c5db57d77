//! Finite-difference reference gradients. Independent of every analytic
//! backward pass: only forward evaluations enter the estimates.

/// Central difference `(f(x + h) - f(x - h)) / 2h` of a scalar function.
pub fn central_diff(mut f: impl FnMut(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Central-difference gradient of `loss` with respect to the listed
/// parameter coordinates. `loss` must treat `params` as read-only input.
pub fn finite_diff_gradient(
    mut loss: impl FnMut(&[f64]) -> f64,
    params: &[f64],
    coords: &[usize],
    h: f64,
) -> Vec<f64> {
    let mut scratch = params.to_vec();
    coords
        .iter()
        .map(|&i| {
            let orig = scratch[i];
            scratch[i] = orig + h;
            let plus = loss(&scratch);
            scratch[i] = orig - h;
            let minus = loss(&scratch);
            scratch[i] = orig;
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// Relative error between an analytic and a numeric gradient entry, with a
/// floor that keeps near-zero pairs from blowing up the ratio.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / denom
}

/// Max relative error over matched coordinate lists.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}
