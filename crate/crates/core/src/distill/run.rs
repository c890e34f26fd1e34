//! The distillation loop.

use std::io::Write;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::provider::ScoreProvider;
use super::sampling::{sample_view_time, ViewSampling};
use super::sds::sds_step;
use super::temporal::{temporal_reg, VideoRefiner};
use crate::error::{Error, Result};
use crate::field4d::Field4DParams;
use crate::gradtape::{ParamId, ParamSet, Tape};
use crate::math::mix_seed;
use crate::optim::{cosine_lr, Adam, AdamConfig};
use crate::renderer::{render_on_tape, EnvironmentMap, RenderOptions};
use crate::schedule::{NoiseSchedule, ScheduleKind, WeightKind};
use crate::template::StateMapSource;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub weight: WeightKind,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            kind: ScheduleKind::LinearBeta,
            steps: 1000,
            beta_min: 1e-4,
            beta_max: 2e-2,
            weight: WeightKind::Unit,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        Ok(make_schedule(self.kind, self.steps, self.beta_min, self.beta_max)?.with_weight(self.weight))
    }
}

pub fn make_schedule(kind: ScheduleKind, steps: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    NoiseSchedule::new(kind, steps, beta_min, beta_max)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub iterations: usize,
    pub seed: u64,
    pub lr_grid: f64,
    pub lr_mlp: f64,
    /// Final learning rate as a fraction of the initial one.
    pub lr_floor: f64,
    pub adam: AdamConfig,
    pub schedule: ScheduleConfig,
    /// Fractions of the schedule length bounding the sampled step.
    pub tau_range: [f64; 2],
    pub prompt: String,
    pub views: ViewSampling,
    pub render: RenderOptions,
    /// Temporal regularizer cadence in iterations; 0 disables it.
    pub vid_every: usize,
    pub lambda_vid: f64,
    pub vid_frames: usize,
    /// Checkpoint cadence in iterations; 0 disables checkpoints.
    pub checkpoint_every: usize,
    pub max_consecutive_rejections: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            iterations: 2000,
            seed: 0,
            lr_grid: 1e-2,
            lr_mlp: 1e-3,
            lr_floor: 0.1,
            adam: AdamConfig::default(),
            schedule: ScheduleConfig::default(),
            tau_range: [0.02, 0.98],
            prompt: String::new(),
            views: ViewSampling::default(),
            render: RenderOptions {
                samples_per_pixel: 4,
                ..RenderOptions::default()
            },
            vid_every: 10,
            lambda_vid: 0.1,
            vid_frames: 8,
            checkpoint_every: 0,
            max_consecutive_rejections: 3,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        self.views.validate()?;
        self.render.validate()?;
        self.schedule.build()?;
        let [lo, hi] = self.tau_range;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return bad(format!("tau_range [{lo}, {hi}] must satisfy 0 <= lo <= hi <= 1"));
        }
        for (name, v) in [("lr_grid", self.lr_grid), ("lr_mlp", self.lr_mlp), ("lambda_vid", self.lambda_vid)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and nonnegative, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.lr_floor) {
            return bad(format!("lr_floor must lie in [0, 1], got {}", self.lr_floor));
        }
        if self.vid_every > 0 && self.vid_frames < 2 {
            return bad(format!("vid_frames must be at least 2, got {}", self.vid_frames));
        }
        if self.max_consecutive_rejections == 0 {
            return bad("max_consecutive_rejections must be at least 1".into());
        }
        Ok(())
    }

    /// Inclusive bounds of the sampled schedule step.
    pub fn tau_bounds(&self) -> (usize, usize) {
        let n = self.schedule.steps;
        let lo = ((self.tau_range[0] * n as f64).round() as usize).clamp(1, n);
        let hi = ((self.tau_range[1] * n as f64).round() as usize).clamp(lo, n);
        (lo, hi)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IterationStatus {
    Applied,
    /// The provider failed; no update was made.
    Skipped,
    /// Non-finite gradients; the update was discarded.
    Rejected,
}

/// One metrics record, written as a line of JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iter: usize,
    pub status: IterationStatus,
    pub t: f64,
    pub azimuth: f64,
    pub elevation: f64,
    pub tau: usize,
    /// Mean squared noise residual; absent when the provider failed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sds_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vid_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grad_norm: Option<f64>,
    pub lr_grid: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

/// Receives metrics and checkpoints as the loop runs.
pub trait DistillObserver {
    fn record(&mut self, _metrics: &IterationMetrics) -> Result<()> {
        Ok(())
    }

    fn checkpoint(&mut self, _iter: usize, _params: &Field4DParams) -> Result<()> {
        Ok(())
    }
}

pub struct NoObserver;

impl DistillObserver for NoObserver {}

/// Writes metrics as NDJSON and checkpoints as `ckpt_{iter:06}.i4d`.
pub struct NdjsonObserver<W: Write> {
    pub writer: W,
    pub checkpoint_dir: Option<PathBuf>,
}

impl<W: Write> DistillObserver for NdjsonObserver<W> {
    fn record(&mut self, metrics: &IterationMetrics) -> Result<()> {
        serde_json::to_writer(&mut self.writer, metrics)?;
        self.writer.write_all(b"\n")?;
        Ok(())
    }

    fn checkpoint(&mut self, iter: usize, params: &Field4DParams) -> Result<()> {
        if let Some(dir) = &self.checkpoint_dir {
            std::fs::create_dir_all(dir)?;
            params.save(&dir.join(format!("ckpt_{iter:06}.i4d")))?;
        }
        Ok(())
    }
}

/// SHA-256 over every parameter array's name and little-endian values.
pub fn checkpoint_hash(params: &Field4DParams) -> String {
    let mut h = Sha256::new();
    for i in 0..params.num_leaves() {
        let id = ParamId(i);
        h.update(params.leaf_name(id).as_bytes());
        for v in params.leaf(id) {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Optimizes `field` by score distillation against `provider`, conditioned
/// on state maps from `template`.
///
/// Every iteration draws from its own generator seeded by
/// `(config.seed, iteration)`. Iterations whose provider call fails are
/// skipped. Iterations with non-finite gradients are rejected before the
/// update, so the parameters stay at their previous values; after
/// `max_consecutive_rejections` rejections in a row the run aborts.
pub fn run_distillation(
    mut field: Field4DParams,
    template: &dyn StateMapSource,
    provider: &mut dyn ScoreProvider,
    refiner: &dyn VideoRefiner,
    env: &EnvironmentMap,
    config: &DistillConfig,
    observer: &mut dyn DistillObserver,
) -> Result<(Field4DParams, Vec<IterationMetrics>)> {
    config.validate()?;
    let schedule = config.schedule.build()?;
    let (tau_lo, tau_hi) = config.tau_bounds();
    let mut adam = Adam::new(&field, config.adam);
    let mut log = Vec::with_capacity(config.iterations);
    let mut rejections = 0;
    for iter in 0..config.iterations {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, iter as u64));
        let view = sample_view_time(&mut rng, &config.views)?;
        let tau = rng.gen_range(tau_lo..=tau_hi);
        let render = RenderOptions {
            seed: rng.gen(),
            ..config.render
        };
        let lr_grid = cosine_lr(config.lr_grid, iter, config.iterations, config.lr_floor);
        let lr_mlp = cosine_lr(config.lr_mlp, iter, config.iterations, config.lr_floor);
        let mut metrics = IterationMetrics {
            iter,
            status: IterationStatus::Applied,
            t: view.t,
            azimuth: view.orbit.azimuth,
            elevation: view.orbit.elevation,
            tau,
            sds_loss: None,
            vid_loss: None,
            grad_norm: None,
            lr_grid,
            message: None,
        };

        let nsm = template.state_map(&view.camera, view.t)?;
        let outcome = {
            let mut tape = Tape::for_params(&field);
            let (image, _) = render_on_tape(&field, &mut tape, &view.camera, view.t, env, &render)?;
            let eps: Vec<f64> = (0..tape.value(image).len()).map(|_| rng.sample(StandardNormal)).collect();
            sds_step(&tape, image, provider, &nsm, &config.prompt, tau, &eps, &schedule, iter as u64)
        };
        let mut grads = match outcome {
            Ok((grads, seed)) => {
                metrics.sds_loss = Some(seed.residual);
                grads
            }
            Err(e @ (Error::Provider(_) | Error::Protocol(_) | Error::ShapeMismatch { .. })) => {
                log::warn!("iteration {iter}: score provider failed, skipping: {e}");
                metrics.status = IterationStatus::Skipped;
                metrics.message = Some(e.to_string());
                observer.record(&metrics)?;
                log.push(metrics);
                continue;
            }
            Err(e) => return Err(e),
        };

        if config.vid_every > 0 && (iter + 1) % config.vid_every == 0 && config.lambda_vid > 0.0 {
            let vid_opts = RenderOptions {
                seed: rng.gen(),
                ..config.render
            };
            let (loss, g) = temporal_reg(&field, &view.camera, config.vid_frames, refiner, env, &vid_opts)?;
            grads.add_scaled(&g, config.lambda_vid)?;
            metrics.vid_loss = Some(loss);
        }

        let norm = grads.norm();
        if let Some(array) = grads.first_non_finite() {
            rejections += 1;
            log::warn!("iteration {iter}: non-finite gradient in `{array}`, update rejected ({rejections} in a row)");
            metrics.status = IterationStatus::Rejected;
            metrics.message = Some(format!("non-finite gradient in `{array}`"));
            metrics.sds_loss = metrics.sds_loss.filter(|v| v.is_finite());
            metrics.vid_loss = metrics.vid_loss.filter(|v| v.is_finite());
            observer.record(&metrics)?;
            log.push(metrics);
            if rejections >= config.max_consecutive_rejections {
                return Err(Error::Aborted(format!(
                    "{rejections} consecutive iterations had non-finite gradients (last at iteration {iter})"
                )));
            }
            continue;
        }
        rejections = 0;
        metrics.grad_norm = Some(norm);
        adam.step(&mut field, &grads, |id| {
            if Field4DParams::is_grid(id) {
                lr_grid
            } else {
                lr_mlp
            }
        })?;
        observer.record(&metrics)?;
        log.push(metrics);
        if config.checkpoint_every > 0 && (iter + 1) % config.checkpoint_every == 0 {
            observer.checkpoint(iter + 1, &field)?;
        }
    }
    Ok((field, log))
}
