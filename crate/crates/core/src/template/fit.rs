//! Fitting per-frame vertex offsets to reference flow.

use serde::{Deserialize, Serialize};

use super::arap::Arap;
use super::raster::{rasterize, soft_iou};
use super::DeformableMeshSequence;
use crate::error::{Error, Result};
use crate::gradtape::{Gradients, ParamId, ParamSet};
use crate::io::FlowMap;
use crate::math::Vec3;
use crate::mesh::TriMesh;
use crate::optim::{cosine_lr, Adam, AdamConfig};
use crate::renderer::CameraPose;

/// Observed flow from the canonical frame to `frame`, seen by `camera`.
#[derive(Clone, Debug)]
pub struct FlowTarget {
    pub frame: usize,
    pub camera: CameraPose,
    pub flow: FlowMap,
    /// Optional foreground mask of `frame` in the same view.
    pub silhouette: Option<Vec<bool>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub iterations: usize,
    pub step_size: f64,
    /// Final step size as a fraction of `step_size` under cosine decay.
    pub step_floor: f64,
    pub lambda_arap: f64,
    pub lambda_sil: f64,
    /// Width in pixels of the soft silhouette edge.
    pub sil_softness: f64,
    pub canonical_frame: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            iterations: 300,
            step_size: 1e-2,
            step_floor: 0.01,
            lambda_arap: 1.0,
            lambda_sil: 0.1,
            sil_softness: 1.0,
            canonical_frame: 0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::InvalidConfig(format!("step_size must be positive, got {}", self.step_size)));
        }
        if !(0.0..=1.0).contains(&self.step_floor) {
            return Err(Error::InvalidConfig(format!("step_floor must lie in [0, 1], got {}", self.step_floor)));
        }
        if !(self.lambda_arap >= 0.0 && self.lambda_sil >= 0.0) {
            return Err(Error::InvalidConfig("regularizer weights must be non-negative".into()));
        }
        if !(self.sil_softness > 0.0) {
            return Err(Error::InvalidConfig("sil_softness must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FitReport {
    /// Total loss before each step, then once more after the last step.
    pub losses: Vec<f64>,
    /// Targets ignored because their flow map has no covered pixel.
    pub skipped_targets: Vec<usize>,
}

impl FitReport {
    pub fn initial_loss(&self) -> f64 {
        self.losses.first().copied().unwrap_or(0.0)
    }

    pub fn final_loss(&self) -> f64 {
        self.losses.last().copied().unwrap_or(0.0)
    }
}

struct Offsets {
    names: Vec<String>,
    data: Vec<Vec<f64>>,
}

impl ParamSet for Offsets {
    fn num_leaves(&self) -> usize {
        self.data.len()
    }
    fn leaf_name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }
    fn leaf(&self, id: ParamId) -> &[f64] {
        &self.data[id.0]
    }
    fn leaf_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.data[id.0]
    }
}

/// Fixed raster of one target: covered pixels with their face and
/// barycentrics on the canonical frame.
struct Prepared {
    pixels: Vec<(usize, [usize; 3], [f64; 3])>,
    origin: Vec<[f64; 2]>,
}

/// Minimizes masked L1 flow error plus `lambda_arap` ARAP energy plus
/// `lambda_sil` soft silhouette IoU loss over per-frame vertex offsets with
/// Adam under cosine step decay. The canonical frame stays at zero offset.
pub fn fit_deformation(
    canonical: &TriMesh,
    frames: usize,
    targets: &[FlowTarget],
    config: &FitConfig,
) -> Result<(DeformableMeshSequence, FitReport)> {
    config.validate()?;
    let mut seq = DeformableMeshSequence::rest(canonical.clone(), frames)?;
    if config.canonical_frame >= frames {
        return Err(Error::InvalidConfig(format!(
            "canonical frame {} outside {frames} frames",
            config.canonical_frame
        )));
    }
    seq.canonical_frame = config.canonical_frame;
    let n = canonical.vertices.len();
    let mut report = FitReport::default();
    let mut prepared = Vec::with_capacity(targets.len());
    for (k, target) in targets.iter().enumerate() {
        if target.frame >= frames {
            return Err(Error::InvalidConfig(format!("target {k} refers to frame {} of {frames}", target.frame)));
        }
        let (w, h) = (target.camera.width, target.camera.height);
        if target.flow.width != w || target.flow.height != h {
            return Err(Error::ShapeMismatch {
                expected: vec![h, w],
                actual: vec![target.flow.height, target.flow.width],
            });
        }
        if target.flow.covered() == 0 {
            log::warn!("flow target {k} (frame {}) has no covered pixel; skipped", target.frame);
            report.skipped_targets.push(k);
            prepared.push(None);
            continue;
        }
        let cov = rasterize(&target.camera, &canonical.vertices, &canonical.faces)?;
        let mut pixels = Vec::new();
        let mut origin = Vec::new();
        for i in 0..w * h {
            let (Some(fi), true) = (cov.face[i], target.flow.mask[i]) else {
                continue;
            };
            let x = cov.point(i, &canonical.faces, &canonical.vertices).expect("covered pixel");
            let Some((u, v, _)) = target.camera.project(&x) else { continue };
            pixels.push((i, canonical.faces[fi], cov.bary[i]));
            origin.push([u, v]);
        }
        prepared.push(Some(Prepared { pixels, origin }));
    }

    let arap = Arap::new(canonical);
    let mut params = Offsets {
        names: (0..frames).map(|k| format!("offsets.{k}")).collect(),
        data: vec![vec![0.0; 3 * n]; frames],
    };
    // A larger epsilon than the field optimizer keeps round-off level
    // gradients from being normalized into full steps.
    let mut adam = Adam::new(
        &params,
        AdamConfig {
            eps: 1e-8,
            ..AdamConfig::default()
        },
    );
    for iter in 0..=config.iterations {
        let (loss, grads) = objective(canonical, &params, targets, &prepared, &arap, config)?;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("deformation loss became {loss} at iteration {iter}")));
        }
        report.losses.push(loss);
        if iter == config.iterations {
            break;
        }
        let lr = cosine_lr(config.step_size, iter, config.iterations, config.step_floor);
        let pinned = config.canonical_frame;
        adam.step(&mut params, &grads, |id| if id.0 == pinned { 0.0 } else { lr })?;
    }
    for (k, frame) in params.data.iter().enumerate() {
        seq.offsets[k] = frame.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect();
    }
    seq.validate()?;
    Ok((seq, report))
}

fn objective(
    canonical: &TriMesh,
    params: &Offsets,
    targets: &[FlowTarget],
    prepared: &[Option<Prepared>],
    arap: &Arap,
    config: &FitConfig,
) -> Result<(f64, Gradients)> {
    let mut grads = Gradients::zeros_like(params);
    let mut loss = 0.0;
    let positions = |k: usize| -> Vec<Vec3> {
        canonical
            .vertices
            .iter()
            .zip(params.data[k].chunks_exact(3))
            .map(|(v, o)| v + Vec3::new(o[0], o[1], o[2]))
            .collect()
    };
    for (target, prep) in targets.iter().zip(prepared) {
        let Some(prep) = prep else { continue };
        let pos = positions(target.frame);
        let mut g = vec![Vec3::zeros(); pos.len()];
        let scale = 1.0 / prep.pixels.len().max(1) as f64;
        for (&(i, f, b), o) in prep.pixels.iter().zip(&prep.origin) {
            let x = pos[f[0]] * b[0] + pos[f[1]] * b[1] + pos[f[2]] * b[2];
            let Some(((u, v, _), [du, dv])) = target.camera.project_jacobian(&x) else {
                continue;
            };
            let want = target.flow.flow[i];
            let (ru, rv) = (u - o[0] - want[0], v - o[1] - want[1]);
            loss += scale * (ru.abs() + rv.abs());
            let dx = scale * (sign(ru) * du + sign(rv) * dv);
            for c in 0..3 {
                g[f[c]] += b[c] * dx;
            }
        }
        if config.lambda_sil > 0.0 {
            if let Some(mask) = &target.silhouette {
                let (l, gs) = soft_iou(&target.camera, &pos, &canonical.faces, mask, config.sil_softness)?;
                loss += config.lambda_sil * l;
                for (a, b) in g.iter_mut().zip(&gs) {
                    *a += config.lambda_sil * b;
                }
            }
        }
        add_vec3(grads.slot_mut(ParamId(target.frame)), &g, 1.0);
    }
    if config.lambda_arap > 0.0 {
        for k in 0..params.data.len() {
            let (e, g) = arap.energy(&positions(k))?;
            loss += config.lambda_arap * e;
            add_vec3(grads.slot_mut(ParamId(k)), &g, config.lambda_arap);
        }
    }
    Ok((loss, grads))
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn add_vec3(dst: &mut [f64], src: &[Vec3], s: f64) {
    for (d, v) in dst.chunks_exact_mut(3).zip(src) {
        for c in 0..3 {
            d[c] += s * v[c];
        }
    }
}
