//! Consistency-model denoising of template renders.

use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;

/// First schedule step, where the consistency function is the identity.
pub const TAU_MIN: usize = 1;

/// Noise predictor `eps_hat(z, c, tau)`.
pub trait Denoiser {
    fn predict_noise(&self, z: &[f64], shape: [usize; 3], condition: &str, tau: usize) -> Result<Vec<f64>>;
}

/// Predicts zero noise everywhere.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroDenoiser;

impl Denoiser for ZeroDenoiser {
    fn predict_noise(&self, z: &[f64], _: [usize; 3], _: &str, _: usize) -> Result<Vec<f64>> {
        Ok(vec![0.0; z.len()])
    }
}

impl<F> Denoiser for F
where
    F: Fn(&[f64], usize) -> Vec<f64>,
{
    fn predict_noise(&self, z: &[f64], _: [usize; 3], _: &str, tau: usize) -> Result<Vec<f64>> {
        Ok(self(z, tau))
    }
}

/// `sigma_d^2 / ((tau - tau_min)^2 + sigma_d^2)`.
pub fn c_skip(tau: usize, sigma_data: f64) -> f64 {
    let d = (tau - TAU_MIN.min(tau)) as f64;
    sigma_data * sigma_data / (d * d + sigma_data * sigma_data)
}

/// `sigma_d (tau - tau_min) / sqrt(tau^2 + sigma_d^2)`.
pub fn c_out(tau: usize, sigma_data: f64) -> f64 {
    let d = (tau - TAU_MIN.min(tau)) as f64;
    let t = tau as f64;
    sigma_data * d / (t * t + sigma_data * sigma_data).sqrt()
}

/// `c_skip(tau) z + c_out(tau) (z - sigma_tau eps_hat) / alpha_tau`.
pub fn consistency_denoise(
    z: &[f64],
    shape: [usize; 3],
    condition: &str,
    tau: usize,
    schedule: &NoiseSchedule,
    denoiser: &dyn Denoiser,
    sigma_data: f64,
) -> Result<Vec<f64>> {
    if shape.iter().product::<usize>() != z.len() {
        return Err(Error::ShapeMismatch {
            expected: shape.to_vec(),
            actual: vec![z.len()],
        });
    }
    let (alpha, sigma) = (schedule.alpha(tau)?, schedule.sigma(tau)?);
    if !(alpha > 0.0) {
        return Err(Error::Numerical(format!("alpha at step {tau} is zero")));
    }
    let eps = denoiser.predict_noise(z, shape, condition, tau)?;
    if eps.len() != z.len() {
        return Err(Error::ShapeMismatch {
            expected: shape.to_vec(),
            actual: vec![eps.len()],
        });
    }
    let (skip, out) = (c_skip(tau, sigma_data), c_out(tau, sigma_data));
    Ok(z.iter()
        .zip(&eps)
        .map(|(z, e)| skip * z + out * (z - sigma * e) / alpha)
        .collect())
}
