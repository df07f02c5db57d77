//! Core DDPM math: forward noising, epsilon-parameterized reverse steps,
//! the simple training loss, and classifier-free guidance combination.
//!
//! All operations are pure functions over `(n_frames, channels)` tensors
//! and a [`NoiseSchedule`].

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{EngineError, Result};
use crate::schedule::NoiseSchedule;

fn check_same_shape(context: &str, a: &Array2<f64>, b: &Array2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(EngineError::dimension(
            context,
            format!("{:?}", a.dim()),
            format!("{:?}", b.dim()),
        ));
    }
    Ok(())
}

/// Draw an i.i.d. standard-normal tensor of the given shape.
pub fn sample_noise<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

/// One-shot forward noising: `x_t = sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps`.
pub fn forward_sample(
    x0: &Array2<f64>,
    t: usize,
    eps: &Array2<f64>,
    schedule: &NoiseSchedule,
) -> Result<Array2<f64>> {
    check_same_shape("forward_sample", x0, eps)?;
    let alpha_bar = schedule.alpha_bar(t)?;
    let signal = alpha_bar.sqrt();
    let noise = (1.0 - alpha_bar).sqrt();
    Ok(x0 * signal + eps * noise)
}

/// Posterior mean with the noise parameterization:
/// `mu = (x_t - (1 - alpha_t) / sqrt(1 - alpha_bar_t) * eps_hat) / sqrt(alpha_t)`.
pub fn predict_mu(
    x_t: &Array2<f64>,
    t: usize,
    eps_hat: &Array2<f64>,
    schedule: &NoiseSchedule,
) -> Result<Array2<f64>> {
    check_same_shape("predict_mu", x_t, eps_hat)?;
    let alpha = schedule.alpha(t)?;
    let alpha_bar = schedule.alpha_bar(t)?;
    let coef = (1.0 - alpha) / (1.0 - alpha_bar).sqrt();
    Ok((x_t - &(eps_hat * coef)) / alpha.sqrt())
}

/// One reverse step `x_{t-1} = mu + sqrt(beta_t) * z`, with variance
/// `sigma_t^2 = beta_t`. The final step (t=1) is deterministic: the noise
/// term is dropped regardless of `z`.
pub fn reverse_step(
    x_t: &Array2<f64>,
    t: usize,
    eps_hat: &Array2<f64>,
    z: &Array2<f64>,
    schedule: &NoiseSchedule,
) -> Result<Array2<f64>> {
    check_same_shape("reverse_step", x_t, z)?;
    let mu = predict_mu(x_t, t, eps_hat, schedule)?;
    if t == 1 {
        return Ok(mu);
    }
    let sigma = schedule.beta(t)?.sqrt();
    Ok(mu + &(z * sigma))
}

/// Mean squared error over all tensor entries: `mean((eps - eps_hat)^2)`.
pub fn simple_loss(eps: &Array2<f64>, eps_hat: &Array2<f64>) -> Result<f64> {
    check_same_shape("simple_loss", eps, eps_hat)?;
    let n = eps.len();
    if n == 0 {
        return Ok(0.0);
    }
    let sum: f64 = eps
        .iter()
        .zip(eps_hat.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sum / n as f64)
}

/// Classifier-free guidance: `(w + 1) * eps_cond - w * eps_uncond`.
pub fn cfg_combine(
    eps_cond: &Array2<f64>,
    eps_uncond: &Array2<f64>,
    w: f64,
) -> Result<Array2<f64>> {
    check_same_shape("cfg_combine", eps_cond, eps_uncond)?;
    Ok(eps_cond * (w + 1.0) - &(eps_uncond * w))
}
