//! Image formation.
//!
//! Rendering is split into a non-differentiable plan and a differentiable
//! shading pass. [`plan_frame`] traces primary rays, fixes hit points, picks
//! the soft-coverage probe point, draws the per-pixel light samples and
//! resolves their shadow rays. [`shade_plan`] then queries the material at
//! each hit, the SDF on a central-difference stencil and at the coverage
//! probe, and evaluates the Monte Carlo estimate with those values. On a
//! tape the second stage is differentiable in the field parameters, while
//! hit positions, sample directions and visibilities stay fixed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::brdf::{brdf_cos, Proposal};
use super::camera::CameraPose;
use super::env::EnvironmentMap;
use super::trace::{march, normals, stencil_points, visibility_batch, Ray, TraceOptions};
use crate::error::{Error, Result};
use crate::field4d::{Field4DParams, FieldSample, Heads, IntrinsicField, SpaceTimePoint, MATERIAL_CHANNELS};
use crate::gradtape::dual::{Dual, Scalar};
use crate::gradtape::{Tape, Tensor, Var};
use crate::io::Image;
use crate::math::{mix_seed, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Background {
    /// Environment radiance along the primary ray.
    Environment,
    Constant([f64; 3]),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderOptions {
    pub samples_per_pixel: usize,
    pub seed: u64,
    pub background: Background,
    pub shadows: bool,
    /// Width of the soft coverage transition as a fraction of the scene
    /// extent; 0 gives hard binary coverage.
    pub edge_softness: f64,
    pub trace: TraceOptions,
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions {
            samples_per_pixel: 16,
            seed: 0,
            background: Background::Environment,
            shadows: true,
            edge_softness: 0.01,
            trace: TraceOptions::default(),
        }
    }
}

impl RenderOptions {
    pub fn validate(&self) -> Result<()> {
        if self.samples_per_pixel == 0 {
            return Err(Error::InvalidConfig("renderer.samples_per_pixel must be at least 1".into()));
        }
        if !(self.edge_softness >= 0.0) {
            return Err(Error::InvalidConfig("renderer.edge_softness must be nonnegative".into()));
        }
        if self.trace.max_steps == 0 || !(self.trace.hit_epsilon > 0.0) || !(self.trace.normal_step > 0.0) {
            return Err(Error::InvalidConfig("renderer.trace options must be positive".into()));
        }
        Ok(())
    }
}

/// Soft coverage is only evaluated for misses that pass within this many
/// transition widths of the surface, and for hits whose deepest probe is
/// no further inside.
const COVERAGE_BAND: f64 = 4.0;
/// Depths, in transition widths, probed behind a hit for the coverage point.
const COVERAGE_PROBES: [f64; 5] = [1.0, 2.0, 4.0, 8.0, 16.0];

/// One light sample: direction and `L_i V / (pdf * spp)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LightSample {
    pub wi: Vec3,
    pub weight: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct PixelPlan {
    pub pixel: usize,
    pub hit: bool,
    /// Shading point: the hit, or the closest approach of a near miss.
    pub position: Vec3,
    /// Unit direction toward the viewer.
    pub wo: Vec3,
    /// Sign applied to the SDF gradient so the normal faces the viewer.
    pub orient: f64,
    /// Point whose SDF drives soft coverage; `None` for hard coverage.
    pub coverage_point: Option<Vec3>,
    pub samples: Vec<LightSample>,
    pub visible_fraction: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FramePlan {
    pub width: usize,
    pub height: usize,
    pub t: f64,
    pub background: Vec<[f64; 3]>,
    pub pixels: Vec<PixelPlan>,
    pub normal_step: f64,
    pub softness: f64,
    pub skipped_samples: usize,
}

impl FramePlan {
    /// Field queries needed by the shading pass: materials at the shading
    /// points, then for every pixel six stencil points and the coverage point.
    pub fn queries(&self) -> (Vec<SpaceTimePoint>, Vec<SpaceTimePoint>) {
        let t = self.t;
        let mats = self.pixels.iter().map(|p| SpaceTimePoint::new(p.position, t)).collect();
        let mut sdf = Vec::with_capacity(self.pixels.len() * 7);
        for p in &self.pixels {
            sdf.extend(stencil_points(&p.position, self.normal_step).map(|x| SpaceTimePoint::new(x, t)));
            sdf.push(SpaceTimePoint::new(p.coverage_point.unwrap_or(p.position), t));
        }
        (mats, sdf)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub rgb: Image,
    pub albedo: Image,
    pub roughness: Image,
    pub metallic: Image,
    pub normal: Image,
    pub visibility: Image,
    pub alpha: Image,
    pub skipped_samples: usize,
}

impl RenderOutput {
    fn blank(plan: &FramePlan) -> Self {
        let (w, h) = (plan.width, plan.height);
        let mut rgb = Image::new(w, h, 3);
        for (px, bg) in rgb.data.chunks_exact_mut(3).zip(&plan.background) {
            px.copy_from_slice(bg);
        }
        RenderOutput {
            rgb,
            albedo: Image::new(w, h, 3),
            roughness: Image::new(w, h, 1),
            metallic: Image::new(w, h, 1),
            normal: Image::new(w, h, 3),
            visibility: Image::new(w, h, 1),
            alpha: Image::new(w, h, 1),
            skipped_samples: plan.skipped_samples,
        }
    }

    /// Named AOV images in a fixed order.
    pub fn aovs(&self) -> [(&'static str, &Image); 6] {
        [
            ("albedo", &self.albedo),
            ("roughness", &self.roughness),
            ("metallic", &self.metallic),
            ("normal", &self.normal),
            ("visibility", &self.visibility),
            ("alpha", &self.alpha),
        ]
    }
}

/// Draws light samples for one shading point. Returns the samples with their
/// environment radiance already folded in (visibility pending) and the
/// number of skipped draws.
fn draw_samples(
    prop: &Proposal,
    env: &EnvironmentMap,
    spp: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<LightSample>, usize) {
    let mut out = Vec::with_capacity(spp);
    let mut skipped = 0;
    for _ in 0..spp {
        let (u0, u1, u2): (f64, f64, f64) = (rng.gen(), rng.gen(), rng.gen());
        let Some(wi) = prop.sample(u0, u1, u2) else {
            skipped += 1;
            continue;
        };
        let pdf = prop.pdf(&wi);
        if !(pdf > 0.0) {
            skipped += 1;
            continue;
        }
        let l = env.lookup(&wi);
        let s = 1.0 / (pdf * spp as f64);
        out.push(LightSample {
            wi,
            weight: l.map(|v| v * s),
        });
    }
    (out, skipped)
}

/// Monte Carlo estimate of reflected radiance at a surface point with
/// normal `n`, viewed from `wo`. `vis` returns the visibility of a
/// direction. Returns the estimate and the number of skipped samples.
pub fn shade(
    n: Vec3,
    sample: &FieldSample,
    env: &EnvironmentMap,
    wo: Vec3,
    rng: &mut ChaCha8Rng,
    n_samples: usize,
    vis: impl Fn(&Vec3) -> f64,
) -> Result<([f64; 3], usize)> {
    if n_samples == 0 {
        return Err(Error::InvalidConfig("shade needs at least one sample".into()));
    }
    let prop = Proposal::new(n, wo, sample.k_d, sample.roughness(), sample.metallic());
    let (samples, skipped) = draw_samples(&prop, env, n_samples, rng);
    let nn = [n.x, n.y, n.z];
    let mut rgb = [0.0; 3];
    for s in samples {
        let v = vis(&s.wi);
        if v == 0.0 {
            continue;
        }
        let f = brdf_cos(&nn, &wo, &s.wi, &sample.k_d, sample.roughness(), sample.metallic());
        for c in 0..3 {
            rgb[c] += f[c] * s.weight[c] * v;
        }
    }
    Ok((rgb, skipped))
}

/// Traces the frame and draws all random decisions.
pub fn plan_frame<F: IntrinsicField + ?Sized>(
    field: &F,
    camera: &CameraPose,
    t: f64,
    env: &EnvironmentMap,
    opts: &RenderOptions,
) -> Result<FramePlan> {
    camera.validate()?;
    opts.validate()?;
    let extent = field.bounds().extent();
    let softness = opts.edge_softness * extent;
    let (w, h) = (camera.width, camera.height);
    let rays: Vec<Ray> = (0..w * h)
        .map(|i| {
            let (origin, dir) = camera.ray(i % w, i / w);
            Ray { origin, dir }
        })
        .collect();
    let background = rays
        .iter()
        .map(|r| match opts.background {
            Background::Environment => env.lookup(&r.dir),
            Background::Constant(c) => c,
        })
        .collect();
    let marches = march(field, &rays, t, &opts.trace)?;

    let mut pixels = Vec::new();
    for (i, m) in marches.iter().enumerate() {
        let r = &rays[i];
        if m.hit {
            pixels.push((i, true, r.origin + m.distance * r.dir));
        } else if softness > 0.0 && m.min_sdf < COVERAGE_BAND * softness {
            pixels.push((i, false, r.origin + m.min_distance * r.dir));
        }
    }

    // Coverage probes behind each hit; the deepest one is kept unless it is
    // already past the band, in which case coverage is hard.
    let mut coverage: Vec<Option<Vec3>> = pixels.iter().map(|&(_, hit, p)| (!hit).then_some(p)).collect();
    if softness > 0.0 {
        let mut probes = Vec::new();
        for &(i, hit, p) in &pixels {
            if hit {
                probes.extend(COVERAGE_PROBES.map(|k| SpaceTimePoint::new(p + k * softness * rays[i].dir, t)));
            }
        }
        let s = field.sdf_batch(&probes)?;
        let mut chunks = s.chunks_exact(COVERAGE_PROBES.len());
        let mut pts = probes.chunks_exact(COVERAGE_PROBES.len());
        for (slot, &(_, hit, _)) in coverage.iter_mut().zip(&pixels) {
            if hit {
                let (vals, ps) = (chunks.next().unwrap(), pts.next().unwrap());
                let k = (0..vals.len()).min_by(|&a, &b| vals[a].total_cmp(&vals[b])).unwrap();
                if vals[k] > -COVERAGE_BAND * softness {
                    *slot = Some(ps[k].x);
                }
            }
        }
    }

    let positions: Vec<Vec3> = pixels.iter().map(|p| p.2).collect();
    let nrm = normals(field, &positions, t, opts.trace.normal_step * extent)?;
    let mats = field.sample_batch(&positions.iter().map(|&x| SpaceTimePoint::new(x, t)).collect::<Vec<_>>())?;

    let mut plans = Vec::with_capacity(pixels.len());
    let mut skipped_samples = 0;
    let mut shadow_starts = Vec::new();
    let mut shadow_dirs = Vec::new();
    for (k, &(i, hit, p)) in pixels.iter().enumerate() {
        let wo = -rays[i].dir;
        let n_raw = nrm[k];
        let orient = if n_raw.dot(&wo) < 0.0 { -1.0 } else { 1.0 };
        let n = n_raw * orient;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(opts.seed, i as u64));
        let mat = &mats[k];
        let (samples, skipped) = if n.norm() > 0.0 {
            let prop = Proposal::new(n, wo, mat.k_d, mat.roughness(), mat.metallic());
            draw_samples(&prop, env, opts.samples_per_pixel, &mut rng)
        } else {
            (Vec::new(), opts.samples_per_pixel)
        };
        skipped_samples += skipped;
        if opts.shadows {
            for s in &samples {
                shadow_starts.push((p, n));
                shadow_dirs.push(s.wi);
            }
        }
        plans.push(PixelPlan {
            pixel: i,
            hit,
            position: p,
            wo,
            orient,
            coverage_point: coverage[k],
            samples,
            visible_fraction: 1.0,
        });
    }
    if opts.shadows {
        let vis = visibility_batch(field, &shadow_starts, &shadow_dirs, t, &opts.trace)?;
        let mut it = vis.into_iter();
        for plan in &mut plans {
            let n = plan.samples.len();
            let v: Vec<f64> = it.by_ref().take(n).collect();
            plan.visible_fraction = if n > 0 { v.iter().sum::<f64>() / n as f64 } else { 0.0 };
            let mut keep = Vec::with_capacity(n);
            for (s, v) in plan.samples.drain(..).zip(v) {
                if v > 0.0 && s.weight.iter().any(|&x| x != 0.0) {
                    keep.push(s);
                }
            }
            plan.samples = keep;
        }
    }
    Ok(FramePlan {
        width: w,
        height: h,
        t,
        background,
        pixels: plans,
        normal_step: opts.trace.normal_step * extent,
        softness,
        skipped_samples,
    })
}

/// Number of differentiable scalars entering one pixel: `k_d`, `r`, `m`,
/// six stencil distances and the coverage distance.
const PIXEL_INPUTS: usize = 12;

struct PixelShade<S> {
    rgb: [S; 3],
    normal: [S; 3],
    alpha: S,
}

fn shade_pixel<S: Scalar>(plan: &PixelPlan, mat: &[S], sdf: &[S], h: f64, softness: f64, bg: &[f64; 3]) -> PixelShade<S> {
    let k_d = [mat[0], mat[1], mat[2]];
    let (r, m) = (mat[3], mat[4]);
    let inv = 1.0 / (2.0 * h);
    let g = [(sdf[0] - sdf[1]) * inv, (sdf[2] - sdf[3]) * inv, (sdf[4] - sdf[5]) * inv];
    let len = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
    let zero = S::cst(0.0);
    let normal = if len.val() > 0.0 {
        let s = len / plan.orient;
        [g[0] / s, g[1] / s, g[2] / s]
    } else {
        [zero; 3]
    };
    let mut rgb = [zero; 3];
    for s in &plan.samples {
        let f = brdf_cos(&normal, &plan.wo, &s.wi, &k_d, r, m);
        for c in 0..3 {
            rgb[c] = rgb[c] + f[c] * s.weight[c];
        }
    }
    let alpha = match plan.coverage_point {
        Some(_) => (-sdf[6] / softness).sigmoid(),
        None => S::cst(1.0),
    };
    let rgb = std::array::from_fn(|c| alpha * (rgb[c] - bg[c]) + bg[c]);
    PixelShade { rgb, normal, alpha }
}

fn material_inputs(s: &FieldSample) -> [f64; 5] {
    [s.k_d[0], s.k_d[1], s.k_d[2], s.k_orm[1], s.k_orm[2]]
}

/// Evaluates a plan given the field values it asked for (see
/// [`FramePlan::queries`]).
pub fn shade_values(plan: &FramePlan, mats: &[FieldSample], sdf: &[f64]) -> Result<RenderOutput> {
    if mats.len() != plan.pixels.len() || sdf.len() != 7 * plan.pixels.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![plan.pixels.len(), 7 * plan.pixels.len()],
            actual: vec![mats.len(), sdf.len()],
        });
    }
    let mut out = RenderOutput::blank(plan);
    for (k, p) in plan.pixels.iter().enumerate() {
        let bg = &plan.background[p.pixel];
        let mi = material_inputs(&mats[k]);
        let r = shade_pixel::<f64>(p, &mi, &sdf[7 * k..7 * k + 7], plan.normal_step, plan.softness, bg);
        let i = p.pixel;
        out.rgb.data[3 * i..3 * i + 3].copy_from_slice(&r.rgb);
        out.albedo.data[3 * i..3 * i + 3].copy_from_slice(&mats[k].k_d);
        out.roughness.data[i] = mats[k].k_orm[1];
        out.metallic.data[i] = mats[k].k_orm[2];
        out.normal.data[3 * i..3 * i + 3].copy_from_slice(&r.normal);
        out.visibility.data[i] = p.visible_fraction;
        out.alpha.data[i] = r.alpha;
    }
    if out.rgb.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("rendered radiance is not finite".into()));
    }
    Ok(out)
}

/// Forward-only shading of a plan.
pub fn shade_plan<F: IntrinsicField + ?Sized>(field: &F, plan: &FramePlan) -> Result<RenderOutput> {
    let (mq, sq) = plan.queries();
    let mats = field.sample_batch(&mq)?;
    let sdf = field.sdf_batch(&sq)?;
    shade_values(plan, &mats, &sdf)
}

/// Deterministic forward render with AOVs.
pub fn render_image<F: IntrinsicField + ?Sized>(
    field: &F,
    camera: &CameraPose,
    t: f64,
    env: &EnvironmentMap,
    opts: &RenderOptions,
) -> Result<RenderOutput> {
    let plan = plan_frame(field, camera, t, env, opts)?;
    shade_plan(field, &plan)
}

/// Records the shading pass of `plan` on `tape`; the result is an
/// `H x W x 3` radiance tensor.
pub fn record_shading<'a>(params: &'a Field4DParams, tape: &mut Tape<'a>, plan: &FramePlan) -> Result<Var> {
    let (mq, sq) = plan.queries();
    let mat_var = params.record(tape, &mq, Heads::MATERIAL)?.material.expect("material head");
    let sdf_var = params.record(tape, &sq, Heads::SDF)?.sdf.expect("sdf head");
    let (w, h) = (plan.width, plan.height);
    let mut image: Vec<f64> = plan.background.iter().flatten().copied().collect();
    let mut jac = Vec::with_capacity(plan.pixels.len() * 3 * PIXEL_INPUTS);
    {
        let mats = tape.value(mat_var).data();
        let sdf = tape.value(sdf_var).data();
        for (k, p) in plan.pixels.iter().enumerate() {
            let mrow = &mats[k * MATERIAL_CHANNELS..(k + 1) * MATERIAL_CHANNELS];
            let mi = [mrow[0], mrow[1], mrow[2], mrow[4], mrow[5]];
            let md: Vec<Dual<PIXEL_INPUTS>> = (0..5).map(|j| Dual::variable(mi[j], j)).collect();
            let sd: Vec<Dual<PIXEL_INPUTS>> = (0..7).map(|j| Dual::variable(sdf[7 * k + j], 5 + j)).collect();
            let bg = &plan.background[p.pixel];
            let r = shade_pixel(p, &md, &sd, plan.normal_step, plan.softness, bg);
            for c in 0..3 {
                image[3 * p.pixel + c] = r.rgb[c].v;
                jac.extend_from_slice(&r.rgb[c].d);
            }
        }
    }
    if image.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("rendered radiance is not finite".into()));
    }
    let pixel_index: Vec<usize> = plan.pixels.iter().map(|p| p.pixel).collect();
    let value = Tensor::new(vec![h, w, 3], image)?;
    Ok(tape.custom(&[mat_var, sdf_var], value, move |g, bp| {
        let mut dm = vec![0.0; pixel_index.len() * MATERIAL_CHANNELS];
        let mut ds = vec![0.0; pixel_index.len() * 7];
        for (k, &i) in pixel_index.iter().enumerate() {
            for c in 0..3 {
                let gc = g[3 * i + c];
                if gc == 0.0 {
                    continue;
                }
                let row = &jac[(3 * k + c) * PIXEL_INPUTS..(3 * k + c + 1) * PIXEL_INPUTS];
                for (j, slot) in [0, 1, 2, 4, 5].into_iter().enumerate() {
                    dm[k * MATERIAL_CHANNELS + slot] += gc * row[j];
                }
                for j in 0..7 {
                    ds[7 * k + j] += gc * row[5 + j];
                }
            }
        }
        if let Some(acc) = bp.grad_mut(mat_var) {
            acc.iter_mut().zip(&dm).for_each(|(a, d)| *a += d);
        }
        if let Some(acc) = bp.grad_mut(sdf_var) {
            acc.iter_mut().zip(&ds).for_each(|(a, d)| *a += d);
        }
    }))
}

/// Plans and records a differentiable render in one call.
pub fn render_on_tape<'a>(
    params: &'a Field4DParams,
    tape: &mut Tape<'a>,
    camera: &CameraPose,
    t: f64,
    env: &EnvironmentMap,
    opts: &RenderOptions,
) -> Result<(Var, FramePlan)> {
    let plan = plan_frame(params, camera, t, env, opts)?;
    let image = record_shading(params, tape, &plan)?;
    Ok((image, plan))
}
