//! Fast invariant suites behind `selfcheck` and the `gradcheck` probe.

use intrinsics4d::distill::{
    conformance_run, make_analytic_provider, sds_seed, spawn_echo, temporal_reg, AnalyticTarget, IdentityRefiner,
};
use intrinsics4d::field4d::{Field4DParams, FieldConfig, Heads, IntrinsicField, SpaceTimePoint};
use intrinsics4d::gradtape::{finite_diff_check, FdReport, Gradients, ParamId, ParamSet, Tape, Tensor};
use intrinsics4d::io::Image;
use intrinsics4d::math::{tangent_frame, Vec3};
use intrinsics4d::renderer::{
    plan_frame, record_shading, render_image, shade, shade_plan, CameraPose, EnvironmentMap, FramePlan, RenderOptions,
};
use intrinsics4d::schedule::{NoiseSchedule, ScheduleKind};
use intrinsics4d::template::assets::uv_sphere;
use intrinsics4d::template::{arap_energy, consistency_denoise, NeuralStateMap, ZeroDenoiser};
use intrinsics4d::{field4d::FieldSample, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn outcome(name: &'static str, run: impl FnOnce() -> Result<(bool, String)>) -> CheckResult {
    match run() {
        Ok((passed, detail)) => CheckResult { name, passed, detail },
        Err(e) => CheckResult {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

/// Field with hash entries drawn from `U(-0.2, 0.2)` and every network
/// weight jittered by `U(-0.1, 0.1)`, so no layer starts near degenerate.
pub fn probe_field(config: FieldConfig, seed: u64) -> Result<Field4DParams> {
    let mut f = Field4DParams::init(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in f.hash_table_mut() {
        *v = rng.gen_range(-0.2..0.2);
    }
    for i in 7..f.num_leaves() {
        for v in f.leaf_mut(ParamId(i)) {
            *v += rng.gen_range(-0.1..0.1);
        }
    }
    Ok(f)
}

fn front_camera(size: usize) -> Result<CameraPose> {
    CameraPose::look_at(Vec3::new(0.0, 0.2, 3.0), Vec3::zeros(), Vec3::y(), 0.7, size, size)
}

/// Maximum relative errors of the pointwise field query and of a
/// `size x size` frozen-plan render.
pub struct GradReport {
    pub pointwise: FdReport,
    pub render: FdReport,
}

pub fn gradcheck(config: FieldConfig, seed: u64, probes: usize, eps: f64, size: usize) -> Result<GradReport> {
    let field = probe_field(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let points: Vec<SpaceTimePoint> = (0..16)
        .map(|_| {
            let x = Vec3::new(rng.gen_range(-0.9..0.9), rng.gen_range(-0.9..0.9), rng.gen_range(-0.9..0.9));
            SpaceTimePoint::new(x, rng.gen_range(0.0..1.0))
        })
        .collect();
    let value = |p: &Field4DParams| -> Result<f64> {
        let sdf: f64 = p.sdf_batch(&points)?.iter().sum();
        let mat: f64 = p
            .sample_batch(&points)?
            .iter()
            .map(|s| s.k_d.iter().chain(&s.k_orm).sum::<f64>())
            .sum();
        Ok(sdf + mat)
    };
    let grad = |p: &Field4DParams| -> Result<(f64, Gradients)> {
        let mut tape = Tape::for_params(p);
        let vars = p.record(&mut tape, &points, Heads::BOTH)?;
        let a = tape.sum(vars.sdf.expect("sdf head"));
        let b = tape.sum(vars.material.expect("material head"));
        let s = tape.add(a, b)?;
        let v = tape.value(s).data()[0];
        Ok((v, tape.backward(s, &Tensor::scalar(1.0))?))
    };
    let pointwise = finite_diff_check(&field, value, grad, probes, eps, seed)?;

    let env = EnvironmentMap::sky(16, 8);
    let opts = RenderOptions {
        samples_per_pixel: 4,
        seed,
        ..RenderOptions::default()
    };
    let plan = plan_frame(&field, &front_camera(size)?, 0.5, &env, &opts)?;
    let value = |p: &Field4DParams| -> Result<f64> {
        let out = shade_plan(p, &plan)?;
        Ok(out.rgb.data.iter().sum::<f64>() / out.rgb.data.len() as f64)
    };
    let render = finite_diff_check(&field, value, |p| mean_image_grad(p, &plan), probes, eps, seed)?;
    Ok(GradReport { pointwise, render })
}

fn mean_image_grad(f: &Field4DParams, plan: &FramePlan) -> Result<(f64, Gradients)> {
    let mut tape = Tape::for_params(f);
    let img = record_shading(f, &mut tape, plan)?;
    let n = tape.value(img).len() as f64;
    let s = tape.sum(img);
    let v = tape.value(s).data()[0] / n;
    Ok((v, tape.backward(s, &Tensor::scalar(1.0 / n))?))
}

pub fn selfcheck() -> Vec<CheckResult> {
    vec![
        outcome("field.hadamard_identity", || {
            let mut f = Field4DParams::init(FieldConfig::tiny(), 1)?;
            let q = SpaceTimePoint::new(Vec3::new(0.13, -0.42, 0.77), 0.31);
            (0..6).for_each(|c| f.plane_mut(c).fill(1.0));
            let ones = f.plane_feature(q)?.iter().all(|&v| v == 1.0);
            f.plane_mut(3).fill(0.0);
            let zeros = f.plane_feature(q)?.iter().all(|&v| v == 0.0);
            Ok((ones && zeros, format!("identity {ones}, annihilator {zeros}")))
        }),
        outcome("field.keyframe_lerp", || {
            let f = probe_field(FieldConfig::tiny(), 4)?;
            let t = f.keyframe_times().to_vec();
            let x = Vec3::new(0.21, -0.37, 0.55);
            let a = f.hash_feature(SpaceTimePoint::new(x, t[0]))?;
            let b = f.hash_feature(SpaceTimePoint::new(x, t[1]))?;
            let m = f.hash_feature(SpaceTimePoint::new(x, 0.5 * (t[0] + t[1])))?;
            let err = (0..a.len()).map(|k| (m[k] - 0.5 * (a[k] + b[k])).abs()).fold(0.0, f64::max);
            Ok((err < 1e-6, format!("midpoint error {err:.2e}")))
        }),
        outcome("field.initial_sphere", || {
            let config = FieldConfig::default();
            let r0 = config.init_radius();
            let f = Field4DParams::init(config, 7)?;
            let s = f.sdf(SpaceTimePoint::new(Vec3::zeros(), 0.5))?;
            Ok(((s + r0).abs() < 0.05 * r0, format!("sdf(0) = {s:.4}, expected {:.4}", -r0)))
        }),
        outcome("gradtape.finite_differences", || {
            let r = gradcheck(FieldConfig::tiny(), 3, 16, 1e-4, 8)?;
            Ok((
                r.pointwise.max_relative_error < 1e-4 && r.render.max_relative_error < 1e-3,
                format!(
                    "pointwise {:.2e}, render {:.2e}",
                    r.pointwise.max_relative_error, r.render.max_relative_error
                ),
            ))
        }),
        outcome("template.denoise_boundary", || {
            let s = NoiseSchedule::new(ScheduleKind::LinearBeta, 1000, 1e-4, 2e-2)?;
            let z: Vec<f64> = (0..48).map(|i| (i as f64 * 0.37).sin()).collect();
            let out = consistency_denoise(&z, [4, 4, 3], "", 1, &s, &ZeroDenoiser, 0.5)?;
            let err = z.iter().zip(&out).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            Ok((err <= 1e-6, format!("max deviation {err:.2e}")))
        }),
        outcome("renderer.white_furnace", || {
            let env = EnvironmentMap::uniform([1.0; 3]);
            let n = Vec3::new(0.2, 0.3, 0.9).normalize();
            let sample = FieldSample {
                sdf: 0.0,
                k_d: [1.0; 3],
                k_orm: [1.0, 1.0, 0.0],
            };
            let mut worst: f64 = 0.0;
            for (i, theta) in [0.1f64, 0.6, 1.1, 1.4].into_iter().enumerate() {
                let (t, _) = tangent_frame(&n);
                let wo = (n * theta.cos() + t * theta.sin()).normalize();
                let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
                let (rgb, _) = shade(n, &sample, &env, wo, &mut rng, 4096, |_| 1.0)?;
                worst = rgb.iter().map(|c| (c - 1.0).abs()).fold(worst, f64::max);
            }
            Ok((worst < 0.02, format!("max deviation {worst:.4}")))
        }),
        outcome("renderer.light_linearity", || {
            let f = probe_field(FieldConfig::tiny(), 5)?;
            let env = EnvironmentMap::sky(16, 8);
            let opts = RenderOptions {
                samples_per_pixel: 4,
                ..RenderOptions::default()
            };
            let cam = front_camera(12)?;
            let a = render_image(&f, &cam, 0.4, &env, &opts)?.rgb;
            let b = render_image(&f, &cam, 0.4, &env.scaled(2.0), &opts)?.rgb;
            let err = a.data.iter().zip(&b.data).map(|(x, y)| (2.0 * x - y).abs()).fold(0.0, f64::max);
            Ok((err < 1e-12, format!("max deviation {err:.2e}")))
        }),
        outcome("template.arap_rigid_invariance", || {
            let mesh = uv_sphere(0.7, 8, 12, |_| [1.0; 3]);
            let (c, s) = (0.7f64.cos(), 0.7f64.sin());
            let moved: Vec<Vec3> = mesh
                .vertices
                .iter()
                .map(|v| Vec3::new(c * v.x + s * v.z, v.y, -s * v.x + c * v.z) + Vec3::new(0.3, -0.2, 0.5))
                .collect();
            let (e, _) = arap_energy(&mesh, &moved)?;
            Ok((e < 1e-9, format!("energy {e:.2e}")))
        }),
        outcome("distill.sds_fixed_point", || {
            let s = NoiseSchedule::new(ScheduleKind::LinearBeta, 1000, 1e-4, 2e-2)?;
            let z0 = Image::from_data(6, 6, 3, (0..108).map(|i| (i % 11) as f64 / 11.0).collect())?;
            let key = Image::filled(2, 2, &[0.1, 0.2, 0.3]);
            let target = AnalyticTarget {
                key: key.clone(),
                prompt: String::new(),
                image: z0.clone(),
            };
            let mut provider = make_analytic_provider(vec![target], s.clone())?;
            let nsm = NeuralStateMap {
                grid: key,
                view: front_camera(6)?,
                t: 0.0,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let eps: Vec<f64> = (0..108).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let out = sds_seed(&z0.data, [6, 6, 3], &mut provider, &nsm, "", 400, &eps, &s, 0)?;
            let zero = out.seed.iter().all(|v| *v == 0.0);
            Ok((zero, format!("max |seed| {:.2e}", out.seed.iter().fold(0.0f64, |m, v| m.max(v.abs())))))
        }),
        outcome("distill.temporal_identity", || {
            let f = probe_field(FieldConfig::tiny(), 6)?;
            let opts = RenderOptions {
                samples_per_pixel: 2,
                shadows: false,
                ..RenderOptions::default()
            };
            let (loss, _) = temporal_reg(&f, &front_camera(8)?, 4, &IdentityRefiner, &EnvironmentMap::sky(16, 8), &opts)?;
            Ok((loss == 0.0, format!("L_vid {loss:.2e}")))
        }),
        outcome("distill.echo_conformance", || {
            let (client, handle) = spawn_echo()?;
            let report = conformance_run(client.try_clone()?, &client, 20, 40, [4, 5, 3], [2, 2, 3], 1)?;
            drop(client);
            let stats = handle.join().map_err(|_| intrinsics4d::Error::Protocol("echo server panicked".into()))??;
            Ok((
                report.passed(),
                format!(
                    "{} responses, {} errors over {} frames, {} violations",
                    report.responses,
                    report.errors,
                    stats.frames,
                    report.violations.len()
                ),
            ))
        }),
    ]
}

