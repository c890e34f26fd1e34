//! Variance-preserving noise schedules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightKind {
    /// `w(tau) = 1`.
    #[default]
    Unit,
    /// `w(tau) = sigma_tau^2`.
    SigmaSquared,
    /// `w(tau) = c`.
    Constant(f64),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    #[default]
    LinearBeta,
}

/// Steps are numbered `1..=steps`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
    pub weight: WeightKind,
}

impl NoiseSchedule {
    /// `alpha_bar_tau = prod_{s <= tau} (1 - beta_s)` with `beta` linear from
    /// `beta_min` at step 1 to `beta_max` at step `steps`.
    pub fn new(kind: ScheduleKind, steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        let ScheduleKind::LinearBeta = kind;
        if steps < 2 {
            return Err(Error::InvalidConfig(format!("schedule needs at least 2 steps, got {steps}")));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "schedule betas must satisfy 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
            )));
        }
        let mut acc = 1.0;
        let alpha_bar = (0..steps)
            .map(|s| {
                let beta = beta_min + (beta_max - beta_min) * s as f64 / (steps - 1) as f64;
                acc *= 1.0 - beta;
                acc
            })
            .collect();
        Ok(NoiseSchedule {
            alpha_bar,
            weight: WeightKind::Unit,
        })
    }

    pub fn with_weight(mut self, weight: WeightKind) -> Self {
        self.weight = weight;
        self
    }

    pub fn steps(&self) -> usize {
        self.alpha_bar.len()
    }

    fn check(&self, tau: usize) -> Result<usize> {
        if tau == 0 || tau > self.steps() {
            return Err(Error::InvalidConfig(format!("step {tau} outside 1..={}", self.steps())));
        }
        Ok(tau - 1)
    }

    pub fn alpha_bar(&self, tau: usize) -> Result<f64> {
        Ok(self.alpha_bar[self.check(tau)?])
    }

    pub fn alpha(&self, tau: usize) -> Result<f64> {
        Ok(self.alpha_bar(tau)?.sqrt())
    }

    pub fn sigma(&self, tau: usize) -> Result<f64> {
        Ok((1.0 - self.alpha_bar(tau)?).sqrt())
    }

    pub fn weight(&self, tau: usize) -> Result<f64> {
        Ok(match self.weight {
            WeightKind::Unit => {
                self.check(tau)?;
                1.0
            }
            WeightKind::SigmaSquared => 1.0 - self.alpha_bar(tau)?,
            WeightKind::Constant(c) => {
                self.check(tau)?;
                c
            }
        })
    }

    /// `z_tau = alpha_tau * z0 + sigma_tau * eps`.
    pub fn add_noise(&self, z0: &[f64], eps: &[f64], tau: usize) -> Result<Vec<f64>> {
        if z0.len() != eps.len() {
            return Err(Error::ShapeMismatch {
                expected: vec![z0.len()],
                actual: vec![eps.len()],
            });
        }
        let (a, s) = (self.alpha(tau)?, self.sigma(tau)?);
        Ok(z0.iter().zip(eps).map(|(z, e)| a * z + s * e).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_alpha_bar() {
        let s = NoiseSchedule::new(ScheduleKind::LinearBeta, 1000, 1e-4, 2e-2).unwrap();
        assert!((s.alpha_bar(1).unwrap() - 0.9999).abs() < 1e-15);
        assert!(s.alpha_bar(0).is_err() && s.alpha_bar(1001).is_err());
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(NoiseSchedule::new(ScheduleKind::LinearBeta, 1, 1e-4, 2e-2).is_err());
        assert!(NoiseSchedule::new(ScheduleKind::LinearBeta, 10, 0.0, 2e-2).is_err());
        assert!(NoiseSchedule::new(ScheduleKind::LinearBeta, 10, 0.5, 0.1).is_err());
        assert!(NoiseSchedule::new(ScheduleKind::LinearBeta, 10, 0.1, 1.0).is_err());
    }
}
