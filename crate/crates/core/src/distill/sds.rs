//! Score distillation gradients through the render tape.

use super::provider::{checked_predict, point_mass_noise, ScoreProvider, ScoreRequest};
use crate::error::{Error, Result};
use crate::gradtape::{Gradients, Tape, Tensor, Var};
use crate::schedule::NoiseSchedule;
use crate::template::NeuralStateMap;

/// Image-space part of one distillation step.
#[derive(Clone, Debug, PartialEq)]
pub struct SdsSeed {
    /// `w(tau) (eps_hat - eps) alpha_tau`, the gradient seeded into the tape.
    pub seed: Vec<f64>,
    /// Mean of `(eps_hat - eps)^2`.
    pub residual: f64,
    pub weight: f64,
}

/// Noises `z0`, queries the provider and forms the backward seed.
///
/// The residual is taken against the noise actually present in `z_tau`,
/// `(z_tau - alpha z0) / sigma`, so a provider that recovers it exactly
/// yields a seed of exact zeros.
#[allow(clippy::too_many_arguments)]
pub fn sds_seed(
    z0: &[f64],
    shape: [usize; 3],
    provider: &mut dyn ScoreProvider,
    nsm: &NeuralStateMap,
    prompt: &str,
    tau: usize,
    eps: &[f64],
    schedule: &NoiseSchedule,
    request_id: u64,
) -> Result<SdsSeed> {
    if shape.iter().product::<usize>() != z0.len() {
        return Err(Error::ShapeMismatch {
            expected: shape.to_vec(),
            actual: vec![z0.len()],
        });
    }
    let z_tau = schedule.add_noise(z0, eps, tau)?;
    let (alpha, sigma, weight) = (schedule.alpha(tau)?, schedule.sigma(tau)?, schedule.weight(tau)?);
    let realized = point_mass_noise(&z_tau, z0, alpha, sigma);
    let request = ScoreRequest {
        id: request_id,
        tau,
        z: z_tau,
        shape,
        nsm: nsm.grid.data.clone(),
        nsm_shape: nsm.shape(),
        prompt: prompt.to_string(),
    };
    let eps_hat = checked_predict(provider, &request)?;
    let mut residual = 0.0;
    let seed = eps_hat
        .iter()
        .zip(&realized)
        .map(|(h, e)| {
            let r = h - e;
            residual += r * r;
            weight * r * alpha
        })
        .collect();
    Ok(SdsSeed {
        seed,
        residual: residual / z0.len().max(1) as f64,
        weight,
    })
}

/// One distillation gradient: `w (eps_hat - eps) alpha dz0/dtheta`.
#[allow(clippy::too_many_arguments)]
pub fn sds_step(
    tape: &Tape<'_>,
    image: Var,
    provider: &mut dyn ScoreProvider,
    nsm: &NeuralStateMap,
    prompt: &str,
    tau: usize,
    eps: &[f64],
    schedule: &NoiseSchedule,
    request_id: u64,
) -> Result<(Gradients, SdsSeed)> {
    let z0 = tape.value(image);
    let shape: [usize; 3] = z0
        .shape()
        .try_into()
        .map_err(|_| Error::InvalidConfig(format!("render tensor has shape {:?}, expected H x W x C", z0.shape())))?;
    let seed = sds_seed(z0.data(), shape, provider, nsm, prompt, tau, eps, schedule, request_id)?;
    let grads = tape.backward(image, &Tensor::new(shape.to_vec(), seed.seed.clone())?)?;
    Ok((grads, seed))
}
