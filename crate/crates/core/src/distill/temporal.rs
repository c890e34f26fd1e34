//! Video refiners and the temporal regularizer.

use crate::error::{Error, Result};
use crate::field4d::Field4DParams;
use crate::gradtape::{Gradients, Tape, Tensor, Var};
use crate::io::Image;
use crate::math::mix_seed;
use crate::renderer::{render_on_tape, CameraPose, EnvironmentMap, RenderOptions};

/// Maps a rendered video to a refined video of the same shape.
pub trait VideoRefiner {
    fn refine(&self, frames: &[Image]) -> Result<Vec<Image>>;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityRefiner;

impl VideoRefiner for IdentityRefiner {
    fn refine(&self, frames: &[Image]) -> Result<Vec<Image>> {
        Ok(frames.to_vec())
    }
}

/// Adds a constant to every pixel.
#[derive(Clone, Copy, Debug)]
pub struct ConstantOffset(pub f64);

impl VideoRefiner for ConstantOffset {
    fn refine(&self, frames: &[Image]) -> Result<Vec<Image>> {
        Ok(frames
            .iter()
            .map(|f| {
                let mut g = f.clone();
                g.data.iter_mut().for_each(|v| *v += self.0);
                g
            })
            .collect())
    }
}

/// Gaussian blur along time with clamped ends; `sigma` is in frames.
#[derive(Clone, Copy, Debug)]
pub struct TemporalSmoothing {
    pub sigma: f64,
}

impl Default for TemporalSmoothing {
    fn default() -> Self {
        TemporalSmoothing { sigma: 1.0 }
    }
}

impl VideoRefiner for TemporalSmoothing {
    fn refine(&self, frames: &[Image]) -> Result<Vec<Image>> {
        if !(self.sigma > 0.0) {
            return Err(Error::InvalidConfig(format!("smoothing sigma must be positive, got {}", self.sigma)));
        }
        let n = frames.len() as isize;
        let radius = (3.0 * self.sigma).ceil() as isize;
        let kernel: Vec<f64> = (-radius..=radius)
            .map(|d| (-0.5 * (d as f64 / self.sigma).powi(2)).exp())
            .collect();
        let norm: f64 = kernel.iter().sum();
        Ok((0..n)
            .map(|k| {
                let mut out = frames[k as usize].clone();
                out.data.iter_mut().for_each(|v| *v = 0.0);
                for (d, w) in (-radius..=radius).zip(&kernel) {
                    let src = &frames[(k + d).clamp(0, n - 1) as usize];
                    out.data.iter_mut().zip(&src.data).for_each(|(o, s)| *o += w / norm * s);
                }
                out
            })
            .collect())
    }
}

/// `t_k = k / (frames - 1)`.
pub fn frame_times(frames: usize) -> Vec<f64> {
    (0..frames).map(|k| k as f64 / (frames - 1) as f64).collect()
}

/// Renders `frames` uniformly spaced timestamps from `camera` and returns
/// the mean squared difference to the refined video together with its
/// gradient. The refined video is held constant.
pub fn temporal_reg(
    field: &Field4DParams,
    camera: &CameraPose,
    frames: usize,
    refiner: &dyn VideoRefiner,
    env: &EnvironmentMap,
    opts: &RenderOptions,
) -> Result<(f64, Gradients)> {
    if frames < 2 {
        return Err(Error::InvalidConfig(format!("temporal regularizer needs at least 2 frames, got {frames}")));
    }
    let mut tapes: Vec<(Tape<'_>, Var)> = Vec::with_capacity(frames);
    let mut video = Vec::with_capacity(frames);
    for (k, t) in frame_times(frames).into_iter().enumerate() {
        let mut tape = Tape::for_params(field);
        let frame_opts = RenderOptions {
            seed: mix_seed(opts.seed, k as u64),
            ..*opts
        };
        let (var, _) = render_on_tape(field, &mut tape, camera, t, env, &frame_opts)?;
        video.push(Image::from_data(camera.width, camera.height, 3, tape.value(var).data().to_vec())?);
        tapes.push((tape, var));
    }
    let refined = refiner.refine(&video)?;
    if refined.len() != video.len() || refined.iter().zip(&video).any(|(r, v)| r.shape() != v.shape()) {
        return Err(Error::ShapeMismatch {
            expected: vec![video.len(), camera.height, camera.width, 3],
            actual: vec![refined.len()],
        });
    }
    let n = (frames * camera.width * camera.height * 3) as f64;
    let mut loss = 0.0;
    let mut grads = Gradients::zeros_like(field);
    for ((tape, var), (v, r)) in tapes.iter().zip(video.iter().zip(&refined)) {
        let diff: Vec<f64> = v.data.iter().zip(&r.data).map(|(a, b)| a - b).collect();
        loss += diff.iter().map(|d| d * d).sum::<f64>() / n;
        let seed = Tensor::new(tape.value(*var).shape().to_vec(), diff.iter().map(|d| 2.0 * d / n).collect())?;
        grads.add_assign(&tape.backward(*var, &seed)?)?;
    }
    if !loss.is_finite() {
        return Err(Error::Numerical("temporal regularizer loss is not finite".into()));
    }
    Ok((loss, grads))
}
