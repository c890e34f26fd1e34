//! Score providers: noise predictors conditioned on a neural state map.

use std::cell::{Cell, RefCell};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::Image;
use crate::schedule::NoiseSchedule;
use crate::template::Denoiser;

/// One noise-prediction query.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreRequest {
    pub id: u64,
    pub tau: usize,
    /// Noisy image `z_tau`, `H x W x C` row-major.
    pub z: Vec<f64>,
    pub shape: [usize; 3],
    /// Neural state map, `H_F x W_F x d_F` row-major.
    pub nsm: Vec<f64>,
    pub nsm_shape: [usize; 3],
    pub prompt: String,
}

impl ScoreRequest {
    pub fn validate(&self) -> Result<()> {
        for (data, shape) in [(&self.z, self.shape), (&self.nsm, self.nsm_shape)] {
            if shape.iter().product::<usize>() != data.len() {
                return Err(Error::ShapeMismatch {
                    expected: shape.to_vec(),
                    actual: vec![data.len()],
                });
            }
        }
        if self.tau == 0 {
            return Err(Error::InvalidConfig("request step must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    pub name: String,
    /// Whether predictions depend on the state map.
    pub uses_state_map: bool,
    /// Whether the provider runs out of process and may miss deadlines.
    pub remote: bool,
}

/// Predicts the noise in `z_tau`; the output has the shape of `z_tau`.
pub trait ScoreProvider {
    fn capabilities(&self) -> Capabilities;
    fn predict(&mut self, request: &ScoreRequest) -> Result<Vec<f64>>;
}

/// Validates the request, queries the provider and checks the answer's
/// length and finiteness.
pub fn checked_predict(provider: &mut dyn ScoreProvider, request: &ScoreRequest) -> Result<Vec<f64>> {
    request.validate()?;
    let eps = provider.predict(request)?;
    if eps.len() != request.z.len() {
        return Err(Error::ShapeMismatch {
            expected: request.shape.to_vec(),
            actual: vec![eps.len()],
        });
    }
    if eps.iter().any(|v| !v.is_finite()) {
        return Err(Error::Provider(format!(
            "{} returned a non-finite prediction",
            provider.capabilities().name
        )));
    }
    Ok(eps)
}

/// Key of one analytic target.
#[derive(Clone, Debug, PartialEq)]
pub struct AnalyticTarget {
    pub key: Image,
    pub prompt: String,
    pub image: Image,
}

/// Exact noise predictor for a point mass at the target whose key state
/// map is nearest to the request's.
#[derive(Clone, Debug)]
pub struct AnalyticProvider {
    targets: Vec<AnalyticTarget>,
    schedule: NoiseSchedule,
}

pub fn make_analytic_provider(targets: Vec<AnalyticTarget>, schedule: NoiseSchedule) -> Result<AnalyticProvider> {
    let Some(first) = targets.first() else {
        return Err(Error::InvalidConfig("analytic provider needs at least one target".into()));
    };
    let (key_shape, image_shape) = (first.key.shape(), first.image.shape());
    for t in &targets {
        for (expected, actual) in [(key_shape, t.key.shape()), (image_shape, t.image.shape())] {
            if expected != actual {
                return Err(Error::ShapeMismatch {
                    expected: expected.to_vec(),
                    actual: actual.to_vec(),
                });
            }
        }
    }
    Ok(AnalyticProvider { targets, schedule })
}

impl AnalyticProvider {
    pub fn targets(&self) -> &[AnalyticTarget] {
        &self.targets
    }

    /// Index of the target answering `request`. Targets whose prompt equals
    /// the request's are preferred; ties go to the earliest target.
    pub fn select(&self, nsm: &[f64], prompt: &str) -> usize {
        let prompted = self.targets.iter().any(|t| t.prompt == prompt);
        let mut best = (f64::INFINITY, 0);
        for (i, t) in self.targets.iter().enumerate() {
            if prompted && t.prompt != prompt {
                continue;
            }
            let d: f64 = t.key.data.iter().zip(nsm).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.0 {
                best = (d, i);
            }
        }
        best.1
    }
}

/// `(z_tau - alpha * z_star) / sigma`, elementwise.
pub(crate) fn point_mass_noise(z_tau: &[f64], z_star: &[f64], alpha: f64, sigma: f64) -> Vec<f64> {
    z_tau.iter().zip(z_star).map(|(z, s)| (z - alpha * s) / sigma).collect()
}

impl ScoreProvider for AnalyticProvider {
    fn capabilities(&self) -> Capabilities {
        Capabilities {
            name: "analytic".into(),
            uses_state_map: true,
            remote: false,
        }
    }

    fn predict(&mut self, request: &ScoreRequest) -> Result<Vec<f64>> {
        let first = &self.targets[0];
        if request.shape != first.image.shape() {
            return Err(Error::ShapeMismatch {
                expected: first.image.shape().to_vec(),
                actual: request.shape.to_vec(),
            });
        }
        if request.nsm_shape != first.key.shape() {
            return Err(Error::ShapeMismatch {
                expected: first.key.shape().to_vec(),
                actual: request.nsm_shape.to_vec(),
            });
        }
        let target = &self.targets[self.select(&request.nsm, &request.prompt)];
        let (a, s) = (self.schedule.alpha(request.tau)?, self.schedule.sigma(request.tau)?);
        Ok(point_mass_noise(&request.z, &target.image.data, a, s))
    }
}

/// Returns `z_tau` unchanged; used to exercise transports.
#[derive(Clone, Copy, Debug, Default)]
pub struct EchoProvider;

impl ScoreProvider for EchoProvider {
    fn capabilities(&self) -> Capabilities {
        Capabilities {
            name: "echo".into(),
            uses_state_map: false,
            remote: false,
        }
    }

    fn predict(&mut self, request: &ScoreRequest) -> Result<Vec<f64>> {
        Ok(request.z.clone())
    }
}

/// Uses a score provider as the template denoiser, with a fixed state map
/// and the denoiser condition as prompt.
pub struct ProviderDenoiser<'a> {
    provider: RefCell<&'a mut dyn ScoreProvider>,
    nsm: Vec<f64>,
    nsm_shape: [usize; 3],
    next_id: Cell<u64>,
}

impl<'a> ProviderDenoiser<'a> {
    pub fn new(provider: &'a mut dyn ScoreProvider, nsm: Vec<f64>, nsm_shape: [usize; 3]) -> Self {
        ProviderDenoiser {
            provider: RefCell::new(provider),
            nsm,
            nsm_shape,
            next_id: Cell::new(0),
        }
    }
}

impl Denoiser for ProviderDenoiser<'_> {
    fn predict_noise(&self, z: &[f64], shape: [usize; 3], condition: &str, tau: usize) -> Result<Vec<f64>> {
        let id = self.next_id.get();
        self.next_id.set(id + 1);
        let request = ScoreRequest {
            id,
            tau,
            z: z.to_vec(),
            shape,
            nsm: self.nsm.clone(),
            nsm_shape: self.nsm_shape,
            prompt: condition.to_string(),
        };
        checked_predict(&mut **self.provider.borrow_mut(), &request)
    }
}
