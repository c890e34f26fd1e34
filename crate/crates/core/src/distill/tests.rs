use std::time::{Duration, Instant};

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use super::protocol::{read_frame, spawn_in_process, write_message, Incoming, Message};
use super::*;
use crate::error::{Error, Result};
use crate::field4d::{Field4DParams, FieldConfig};
use crate::gradtape::{Gradients, ParamId, ParamSet, Tape};
use crate::io::Image;
use crate::math::Vec3;
use crate::optim::{Adam, AdamConfig};
use crate::renderer::{render_on_tape, CameraPose, EnvironmentMap, Orbit, RenderOptions};
use crate::template::{c_out, c_skip, consistency_denoise, NeuralStateMap, StateMapSource};

fn schedule() -> NoiseSchedule {
    make_schedule(ScheduleKind::LinearBeta, 1000, 1e-4, 2e-2).unwrap()
}

fn tiny_field(seed: u64) -> Field4DParams {
    let mut p = Field4DParams::init(FieldConfig::tiny(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in p.hash_table_mut() {
        *v = rng.gen_range(-0.2..0.2);
    }
    p
}

fn camera(size: usize) -> CameraPose {
    CameraPose::look_at(Vec3::new(0.0, 0.3, 3.0), Vec3::zeros(), Vec3::y(), 0.7, size, size).unwrap()
}

fn fast_opts(seed: u64) -> RenderOptions {
    RenderOptions {
        samples_per_pixel: 2,
        seed,
        shadows: false,
        ..RenderOptions::default()
    }
}

fn nsm(grid: Vec<f64>, shape: [usize; 3]) -> NeuralStateMap {
    NeuralStateMap {
        grid: Image::from_data(shape[1], shape[0], shape[2], grid).unwrap(),
        view: camera(4),
        t: 0.0,
    }
}

/// State maps that encode the camera position and time directly.
struct PoseMap;

impl StateMapSource for PoseMap {
    fn state_map(&self, view: &CameraPose, t: f64) -> Result<NeuralStateMap> {
        let p = view.translation;
        Ok(NeuralStateMap {
            grid: Image::from_data(2, 1, 2, vec![p.x, p.y, p.z, t])?,
            view: view.clone(),
            t,
        })
    }

    fn map_shape(&self) -> [usize; 3] {
        [1, 2, 2]
    }
}

fn image(w: usize, h: usize, f: impl Fn(usize) -> f64) -> Image {
    Image::from_data(w, h, 3, (0..w * h * 3).map(f).collect()).unwrap()
}

// Schedule and forward process.

#[test]
fn schedule_is_variance_preserving() {
    let s = schedule();
    for tau in 1..=s.steps() {
        let (a, g) = (s.alpha(tau).unwrap(), s.sigma(tau).unwrap());
        assert!((a * a + g * g - 1.0).abs() < 1e-6, "tau {tau}");
        if tau > 1 {
            assert!(s.alpha_bar(tau).unwrap() < s.alpha_bar(tau - 1).unwrap());
        }
    }
}

#[test]
fn schedule_matches_direct_product() {
    let s = schedule();
    let mut prod = 1.0;
    for k in 1..=1000 {
        let beta = 1e-4 + (2e-2 - 1e-4) * (k - 1) as f64 / 999.0;
        prod *= 1.0 - beta;
    }
    assert!((s.alpha_bar(1000).unwrap() - prod).abs() < 1e-6);
    assert!((s.alpha_bar(1).unwrap() - 0.9999).abs() < 1e-12);
}

#[test]
fn add_noise_endpoints() {
    let s = schedule();
    let z0: Vec<f64> = (0..50).map(|i| (i as f64 * 0.3).sin()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let eps: Vec<f64> = (0..50).map(|_| rng.sample(StandardNormal)).collect();
    let z = s.add_noise(&z0, &eps, 1).unwrap();
    let dev = z.iter().zip(&z0).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let norm = z0.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(dev < 0.02 * norm, "{dev} vs {norm}");

    let a = s.alpha(400).unwrap();
    let z = s.add_noise(&z0, &vec![0.0; 50], 400).unwrap();
    assert!(z.iter().zip(&z0).all(|(v, z0)| *v == a * z0));
    assert!(s.add_noise(&z0, &eps[..10], 3).is_err());
}

#[test]
fn add_noise_variance_matches_monte_carlo() {
    let s = schedule();
    let tau = 500;
    let var0: f64 = 0.49;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let draws: Vec<f64> = (0..10_000)
        .map(|_| {
            let z0 = var0.sqrt() * rng.sample::<f64, _>(StandardNormal);
            let e: f64 = rng.sample(StandardNormal);
            s.add_noise(&[z0], &[e], tau).unwrap()[0]
        })
        .collect();
    let mean = draws.iter().sum::<f64>() / draws.len() as f64;
    let var = draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (draws.len() - 1) as f64;
    let (a, g) = (s.alpha(tau).unwrap(), s.sigma(tau).unwrap());
    let expected = g * g + a * a * var0;
    assert!((var - expected).abs() < 0.02 * expected, "{var} vs {expected}");
}

// Providers.

#[test]
fn analytic_provider_recovers_noise() {
    let s = schedule();
    let target = image(4, 3, |i| (i as f64 * 0.7).cos());
    let mut p = make_analytic_provider(
        vec![AnalyticTarget {
            key: Image::filled(2, 2, &[0.0; 3]),
            prompt: String::new(),
            image: target.clone(),
        }],
        s.clone(),
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let eps: Vec<f64> = (0..36).map(|_| rng.sample(StandardNormal)).collect();
    for tau in [1, 20, 500, 1000] {
        let z = s.add_noise(&target.data, &eps, tau).unwrap();
        let req = ScoreRequest {
            id: 0,
            tau,
            z,
            shape: [3, 4, 3],
            nsm: vec![0.0; 12],
            nsm_shape: [2, 2, 3],
            prompt: String::new(),
        };
        let out = checked_predict(&mut p, &req).unwrap();
        let err = out.iter().zip(&eps).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        // Cancellation in z - alpha z* loses digits in proportion to alpha / sigma.
        assert!(err < 1e-12 * (1.0 + s.alpha(tau).unwrap() / s.sigma(tau).unwrap()), "tau {tau}: {err}");
    }
}

#[test]
fn analytic_provider_selects_nearest_key() {
    let s = schedule();
    let keys = [vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 0.0, 0.0]];
    let images = [image(2, 2, |_| 0.2), image(2, 2, |i| i as f64 * 0.1)];
    let targets = keys
        .iter()
        .zip(&images)
        .map(|(k, im)| AnalyticTarget {
            key: Image::from_data(2, 2, 1, k.clone()).unwrap(),
            prompt: "p".into(),
            image: im.clone(),
        })
        .collect();
    let mut p = make_analytic_provider(targets, s.clone()).unwrap();
    let map = nsm(keys[1].clone(), [2, 2, 1]);
    // Target #2 is at its own fixed point, target #1 is not.
    let tau = 300;
    let eps = vec![0.0; 12];
    let seed = sds_seed(&images[1].data, [2, 2, 3], &mut p, &map, "p", tau, &eps, &s, 0).unwrap();
    assert!(seed.seed.iter().all(|v| *v == 0.0));
    let seed = sds_seed(&images[0].data, [2, 2, 3], &mut p, &map, "p", tau, &eps, &s, 1).unwrap();
    assert!(seed.seed.iter().any(|v| *v != 0.0));
    assert_eq!(p.select(&keys[0], "p"), 0);
}

#[test]
fn analytic_provider_prefers_matching_prompt() {
    let s = schedule();
    let t = |key: f64, prompt: &str| AnalyticTarget {
        key: Image::filled(1, 1, &[key]),
        prompt: prompt.into(),
        image: image(1, 1, |_| key),
    };
    let p = make_analytic_provider(vec![t(0.0, "a"), t(5.0, "b")], s).unwrap();
    assert_eq!(p.select(&[0.1], "b"), 1);
    assert_eq!(p.select(&[4.9], "a"), 0);
    assert_eq!(p.select(&[4.9], "other"), 1);
}

#[test]
fn analytic_provider_rejects_bad_inputs() {
    let s = schedule();
    assert!(make_analytic_provider(vec![], s.clone()).is_err());
    let a = AnalyticTarget {
        key: Image::filled(2, 2, &[0.0]),
        prompt: String::new(),
        image: image(2, 2, |_| 0.0),
    };
    let mut b = a.clone();
    b.image = image(3, 2, |_| 0.0);
    assert!(make_analytic_provider(vec![a.clone(), b], s.clone()).is_err());
    let mut p = make_analytic_provider(vec![a], s).unwrap();
    let req = ScoreRequest {
        id: 0,
        tau: 3,
        z: vec![0.0; 27],
        shape: [3, 3, 3],
        nsm: vec![0.0; 4],
        nsm_shape: [2, 2, 1],
        prompt: String::new(),
    };
    assert!(matches!(checked_predict(&mut p, &req), Err(Error::ShapeMismatch { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn selection_is_shift_invariant(seed in 0u64..10_000, shift in -50.0f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut keys: Vec<Vec<f64>> = (0..5).map(|_| (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let mut query: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let build = |keys: &[Vec<f64>]| {
            make_analytic_provider(
                keys.iter()
                    .map(|k| AnalyticTarget {
                        key: Image::from_data(3, 2, 1, k.clone()).unwrap(),
                        prompt: String::new(),
                        image: image(1, 1, |_| 0.0),
                    })
                    .collect(),
                schedule(),
            )
            .unwrap()
        };
        let before = build(&keys).select(&query, "");
        keys.iter_mut().flatten().for_each(|v| *v += shift);
        query.iter_mut().for_each(|v| *v += shift);
        prop_assert_eq!(build(&keys).select(&query, ""), before);
    }
}

// Score distillation.

fn render_tape_sds(
    field: &Field4DParams,
    provider: &mut dyn ScoreProvider,
    s: &NoiseSchedule,
    eps_seed: u64,
    tau: usize,
) -> (Gradients, SdsSeed) {
    let mut tape = Tape::for_params(field);
    let (img, _) = render_on_tape(field, &mut tape, &camera(8), 0.3, &EnvironmentMap::sky(16, 8), &fast_opts(1)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(eps_seed);
    let eps: Vec<f64> = (0..tape.value(img).len()).map(|_| rng.sample(StandardNormal)).collect();
    let map = nsm(vec![0.0; 4], [2, 2, 1]);
    sds_step(&tape, img, provider, &map, "", tau, &eps, s, 0).unwrap()
}


fn z0_of(field: &Field4DParams) -> Image {
    let mut tape = Tape::for_params(field);
    let (img, _) = render_on_tape(field, &mut tape, &camera(8), 0.3, &EnvironmentMap::sky(16, 8), &fast_opts(1)).unwrap();
    Image::from_data(8, 8, 3, tape.value(img).data().to_vec()).unwrap()
}

fn provider_for(target: Image, s: &NoiseSchedule) -> AnalyticProvider {
    make_analytic_provider(
        vec![AnalyticTarget {
            key: Image::filled(2, 2, &[0.0]),
            prompt: String::new(),
            image: target,
        }],
        s.clone(),
    )
    .unwrap()
}

#[test]
fn sds_gradient_vanishes_at_fixed_point() {
    let field = tiny_field(4);
    let s = schedule();
    let mut p = provider_for(z0_of(&field), &s);
    for (tau, seed) in [(20, 1), (500, 2), (980, 3)] {
        let (grads, out) = render_tape_sds(&field, &mut p, &s, seed, tau);
        assert!(out.seed.iter().all(|v| v.to_bits() == 0), "tau {tau}");
        assert_eq!(out.residual, 0.0);
        assert!(grads.is_zero());
    }
}

#[test]
fn sds_zero_weight_gives_zero_gradient() {
    let field = tiny_field(4);
    let s = schedule().with_weight(WeightKind::Constant(0.0));
    let mut p = provider_for(image(8, 8, |i| (i % 7) as f64 * 0.1), &s);
    let (grads, out) = render_tape_sds(&field, &mut p, &s, 5, 400);
    assert!(out.residual > 0.0);
    assert!(grads.is_zero());
}

#[test]
fn sds_gradient_is_linear_in_weight() {
    let field = tiny_field(4);
    let target = image(8, 8, |i| (i % 5) as f64 * 0.2);
    let s1 = schedule().with_weight(WeightKind::Constant(1.0));
    let s2 = schedule().with_weight(WeightKind::Constant(2.0));
    let (g1, _) = render_tape_sds(&field, &mut provider_for(target.clone(), &s1), &s1, 6, 300);
    let (g2, _) = render_tape_sds(&field, &mut provider_for(target, &s2), &s2, 6, 300);
    assert!(!g1.is_zero());
    for i in 0..field.num_leaves() {
        let id = ParamId(i);
        let (a, b) = (g1.get(id).unwrap_or(&[]), g2.get(id).unwrap_or(&[]));
        assert!(a.iter().zip(b).all(|(x, y)| 2.0 * x == *y), "{}", field.leaf_name(id));
    }
}

#[test]
fn sds_expected_gradient_matches_closed_form() {
    let s = schedule();
    let z0 = image(6, 5, |i| 0.5 + 0.4 * (i as f64 * 0.37).sin());
    let z_star = image(6, 5, |i| 0.5 + 0.3 * (i as f64 * 0.91).cos());
    let mut p = provider_for(z_star.clone(), &s);
    let map = nsm(vec![0.0; 4], [2, 2, 1]);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for tau in [50, 400, 900] {
        let mut mean = vec![0.0; z0.data.len()];
        for k in 0..1000 {
            let eps: Vec<f64> = (0..z0.data.len()).map(|_| rng.sample(StandardNormal)).collect();
            let out = sds_seed(&z0.data, z0.shape(), &mut p, &map, "", tau, &eps, &s, k).unwrap();
            mean.iter_mut().zip(&out.seed).for_each(|(m, v)| *m += v / 1000.0);
        }
        let (a, g) = (s.alpha(tau).unwrap(), s.sigma(tau).unwrap());
        for (i, m) in mean.iter().enumerate() {
            let expected = a * a / g * (z0.data[i] - z_star.data[i]);
            assert!((m - expected).abs() <= 0.05 * expected.abs() + 1e-12, "tau {tau} pixel {i}: {m} vs {expected}");
        }
    }
}

#[test]
fn sds_rejects_wrong_provider_shape() {
    struct Short;
    impl ScoreProvider for Short {
        fn capabilities(&self) -> Capabilities {
            Capabilities::default()
        }
        fn predict(&mut self, r: &ScoreRequest) -> Result<Vec<f64>> {
            Ok(vec![0.0; r.z.len() - 1])
        }
    }
    let map = nsm(vec![0.0; 4], [2, 2, 1]);
    let r = sds_seed(&[0.0; 12], [2, 2, 3], &mut Short, &map, "", 3, &[0.0; 12], &schedule(), 0);
    assert!(matches!(r, Err(Error::ShapeMismatch { .. })));
}

// Temporal regularizer.

#[test]
fn temporal_reg_identity_is_zero() {
    let field = tiny_field(5);
    let env = EnvironmentMap::sky(16, 8);
    let (loss, grads) = temporal_reg(&field, &camera(8), 4, &IdentityRefiner, &env, &fast_opts(2)).unwrap();
    assert_eq!(loss, 0.0);
    assert!(grads.is_zero());
}

#[test]
fn temporal_reg_constant_offset() {
    let field = tiny_field(5);
    let env = EnvironmentMap::sky(16, 8);
    for c in [0.1, -0.35] {
        let (loss, _) = temporal_reg(&field, &camera(8), 3, &ConstantOffset(c), &env, &fast_opts(2)).unwrap();
        assert!((loss - c * c).abs() < 1e-6, "{loss}");
    }
    assert!(temporal_reg(&field, &camera(8), 1, &IdentityRefiner, &env, &fast_opts(2)).is_err());
}

#[test]
fn temporal_smoothing_preserves_constant_video() {
    let frames: Vec<Image> = (0..5).map(|_| image(3, 2, |i| i as f64)).collect();
    let out = TemporalSmoothing::default().refine(&frames).unwrap();
    for (a, b) in out.iter().zip(&frames) {
        assert!(a.data.iter().zip(&b.data).all(|(x, y)| (x - y).abs() < 1e-12));
    }
    let flicker: Vec<Image> = (0..6).map(|k| Image::filled(1, 1, &[(k % 2) as f64])).collect();
    let out = TemporalSmoothing::default().refine(&flicker).unwrap();
    let swing = |v: &[Image]| v.windows(2).map(|w| (w[1].data[0] - w[0].data[0]).abs()).sum::<f64>();
    assert!(swing(&out) < 0.5 * swing(&flicker));
}

/// A field whose middle keyframe differs strongly from its neighbours.
pub(crate) fn flicker_field() -> Field4DParams {
    let mut field = tiny_field(6);
    let cfg = field.config().clone();
    let per_key = cfg.hash_levels * cfg.table_size() * cfg.level_channels;
    let mut rng = ChaCha8Rng::seed_from_u64(60);
    for v in &mut field.hash_table_mut()[per_key..2 * per_key] {
        *v = rng.gen_range(-0.8..0.8);
    }
    field
}

#[test]
fn temporal_smoothing_reduces_flicker_loss() {
    let mut field = flicker_field();
    let env = EnvironmentMap::sky(16, 8);
    // Every pixel sees the surface, so no pixel switches between hit and miss.
    let cam = CameraPose::look_at(Vec3::new(0.0, 0.2, 1.4), Vec3::zeros(), Vec3::y(), 0.3, 8, 8).unwrap();
    let covered = |f: &Field4DParams| {
        frame_times(8).into_iter().all(|t| {
            let plan = crate::renderer::plan_frame(f, &cam, t, &env, &fast_opts(4)).unwrap();
            plan.pixels.len() == 64 && plan.pixels.iter().all(|p| p.hit)
        })
    };
    assert!(covered(&field));
    let refiner = TemporalSmoothing { sigma: 1.0 };
    let mut adam = Adam::new(&field, AdamConfig::default());
    let mut losses = Vec::new();
    for _ in 0..50 {
        let (loss, grads) = temporal_reg(&field, &cam, 8, &refiner, &env, &fast_opts(4)).unwrap();
        losses.push(loss);
        adam.step(&mut field, &grads, |_| 5e-4).unwrap();
    }
    let (last, _) = temporal_reg(&field, &cam, 8, &refiner, &env, &fast_opts(4)).unwrap();
    losses.push(last);
    assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
    assert!(last < 0.8 * losses[0], "{losses:?}");
    assert!(covered(&field));
}

// View sampling.

fn sampling() -> ViewSampling {
    ViewSampling {
        width: 4,
        height: 4,
        ..ViewSampling::default()
    }
}

#[test]
fn view_sampling_is_deterministic() {
    let draw = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..20).map(|_| sample_view_time(&mut rng, &sampling()).unwrap()).collect::<Vec<_>>()
    };
    assert_eq!(draw(5), draw(5));
    assert_ne!(draw(5), draw(6));
}

#[test]
fn view_sampling_azimuth_is_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let bins = 20;
    let mut counts = vec![0usize; bins];
    let n = 10_000;
    for _ in 0..n {
        let v = sample_view_time(&mut rng, &sampling()).unwrap();
        assert!((0.0..1.0).contains(&v.t));
        let a = v.orbit.azimuth / std::f64::consts::TAU;
        counts[((a * bins as f64) as usize).min(bins - 1)] += 1;
    }
    let expected = n as f64 / bins as f64;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let p = 1.0 - ChiSquared::new((bins - 1) as f64).unwrap().cdf(chi2);
    assert!(p > 0.01, "chi2 {chi2}, p {p}");
}

#[test]
fn degenerate_elevation_range_is_exact() {
    let cfg = ViewSampling {
        elevation_deg: [30.0, 30.0],
        ..sampling()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..100 {
        let v = sample_view_time(&mut rng, &cfg).unwrap();
        assert_eq!(v.orbit.elevation, 30f64.to_radians());
        let fwd = v.camera.forward();
        let to_center = (Vec3::from(cfg.center) - v.camera.translation).normalize();
        assert!((fwd - to_center).norm() < 1e-12);
    }
    let bad = ViewSampling {
        elevation_deg: [40.0, 30.0],
        ..sampling()
    };
    assert!(sample_view_time(&mut rng, &bad).is_err());
}

// Distillation loop.

fn small_config(iterations: usize) -> DistillConfig {
    DistillConfig {
        iterations,
        seed: 3,
        views: ViewSampling {
            width: 8,
            height: 8,
            ..ViewSampling::default()
        },
        render: fast_opts(0),
        vid_every: 2,
        vid_frames: 2,
        ..DistillConfig::default()
    }
}

fn target_provider(s: &NoiseSchedule) -> AnalyticProvider {
    let field = tiny_field(9);
    let env = EnvironmentMap::sky(16, 8);
    let cfg = small_config(0);
    let targets = (0..4)
        .map(|k| {
            let orbit = Orbit {
                azimuth: k as f64 * std::f64::consts::FRAC_PI_2,
                elevation: 0.2,
                radius: cfg.views.radius,
                center: [0.0; 3],
            };
            let cam = cfg.views.camera(&orbit).unwrap();
            let img = crate::renderer::render_image(&field, &cam, 0.5, &env, &fast_opts(0)).unwrap().rgb;
            AnalyticTarget {
                key: PoseMap.state_map(&cam, 0.5).unwrap().grid,
                prompt: String::new(),
                image: img,
            }
        })
        .collect();
    make_analytic_provider(targets, s.clone()).unwrap()
}

#[test]
fn zero_iterations_leave_field_untouched() {
    let field = tiny_field(1);
    let s = schedule();
    let (out, log) = run_distillation(
        field.clone(),
        &PoseMap,
        &mut target_provider(&s),
        &IdentityRefiner,
        &EnvironmentMap::sky(16, 8),
        &small_config(0),
        &mut NoObserver,
    )
    .unwrap();
    assert!(log.is_empty());
    assert_eq!(checkpoint_hash(&out), checkpoint_hash(&field));
    for i in 0..field.num_leaves() {
        let id = ParamId(i);
        assert!(out.leaf(id).iter().zip(field.leaf(id)).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

#[test]
fn distillation_is_deterministic_and_logs_every_iteration() {
    let s = schedule();
    let env = EnvironmentMap::sky(16, 8);
    let run = || {
        let mut lines = Vec::new();
        let mut obs = NdjsonObserver {
            writer: &mut lines,
            checkpoint_dir: None,
        };
        let (out, log) = run_distillation(
            tiny_field(1),
            &PoseMap,
            &mut target_provider(&s),
            &TemporalSmoothing::default(),
            &env,
            &small_config(6),
            &mut obs,
        )
        .unwrap();
        (checkpoint_hash(&out), log, String::from_utf8(lines).unwrap())
    };
    let (h1, log1, ndjson) = run();
    let (h2, log2, _) = run();
    assert_eq!(h1, h2);
    assert_eq!(log1, log2);
    assert_ne!(h1, checkpoint_hash(&tiny_field(1)));
    assert_eq!(log1.len(), 6);
    assert!(log1.iter().all(|m| m.status == IterationStatus::Applied && m.sds_loss.unwrap().is_finite()));
    assert_eq!(log1.iter().filter(|m| m.vid_loss.is_some()).count(), 3);
    let parsed: Vec<IterationMetrics> = ndjson.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(parsed.len(), 6);
    assert_eq!(parsed[5].iter, 5);
}

#[test]
fn checkpoints_follow_cadence() {
    let dir = tempfile::tempdir().unwrap();
    let mut obs = NdjsonObserver {
        writer: std::io::sink(),
        checkpoint_dir: Some(dir.path().to_path_buf()),
    };
    let cfg = DistillConfig {
        checkpoint_every: 2,
        vid_every: 0,
        ..small_config(5)
    };
    let (out, _) = run_distillation(
        tiny_field(1),
        &PoseMap,
        &mut target_provider(&schedule()),
        &IdentityRefiner,
        &EnvironmentMap::sky(16, 8),
        &cfg,
        &mut obs,
    )
    .unwrap();
    let mut names: Vec<String> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names, ["ckpt_000002.i4d", "ckpt_000004.i4d"]);
    let loaded = Field4DParams::load(&dir.path().join("ckpt_000004.i4d")).unwrap();
    assert_ne!(checkpoint_hash(&loaded), checkpoint_hash(&out));
}

struct Failing {
    calls: usize,
    fail_on: Vec<usize>,
    huge: bool,
}

impl ScoreProvider for Failing {
    fn capabilities(&self) -> Capabilities {
        Capabilities::default()
    }
    fn predict(&mut self, r: &ScoreRequest) -> Result<Vec<f64>> {
        self.calls += 1;
        if self.huge {
            return Ok(vec![f64::MAX; r.z.len()]);
        }
        if self.fail_on.contains(&(self.calls - 1)) {
            return Err(Error::Provider("timed out".into()));
        }
        Ok(vec![0.1; r.z.len()])
    }
}

#[test]
fn provider_failures_skip_iterations() {
    let mut p = Failing {
        calls: 0,
        fail_on: vec![1, 2],
        huge: false,
    };
    let cfg = DistillConfig {
        vid_every: 0,
        ..small_config(4)
    };
    let (_, log) = run_distillation(
        tiny_field(1),
        &PoseMap,
        &mut p,
        &IdentityRefiner,
        &EnvironmentMap::sky(16, 8),
        &cfg,
        &mut NoObserver,
    )
    .unwrap();
    let status: Vec<_> = log.iter().map(|m| m.status).collect();
    use IterationStatus::*;
    assert_eq!(status, [Applied, Skipped, Skipped, Applied]);
    assert!(log[1].message.as_deref().unwrap().contains("timed out"));
    assert!(log[1].sds_loss.is_none());
}

#[test]
fn non_finite_gradients_abort_after_three_rejections() {
    let mut p = Failing {
        calls: 0,
        fail_on: vec![],
        huge: true,
    };
    let cfg = DistillConfig {
        vid_every: 0,
        ..small_config(10)
    };
    let mut log = Vec::new();
    let mut obs = NdjsonObserver {
        writer: &mut log,
        checkpoint_dir: None,
    };
    let err = run_distillation(
        tiny_field(1),
        &PoseMap,
        &mut p,
        &IdentityRefiner,
        &EnvironmentMap::sky(16, 8),
        &cfg,
        &mut obs,
    )
    .unwrap_err();
    assert!(matches!(err, Error::Aborted(_)), "{err}");
    assert_eq!(p.calls, 3);
    let records: Vec<IterationMetrics> = String::from_utf8(log)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(records.len(), 3);
    assert!(records.iter().all(|m| m.status == IterationStatus::Rejected));
}

#[test]
fn invalid_config_is_rejected() {
    let bad = DistillConfig {
        tau_range: [0.9, 0.1],
        ..small_config(1)
    };
    assert!(bad.validate().is_err());
    let bad = DistillConfig {
        vid_frames: 1,
        ..small_config(1)
    };
    assert!(bad.validate().is_err());
    let cfg = small_config(1);
    assert_eq!(cfg.tau_bounds(), (20, 980));
}

// Wire protocol.

fn request(id: u64, shape: [usize; 3]) -> ScoreRequest {
    let n: usize = shape.iter().product();
    ScoreRequest {
        id,
        tau: 17,
        z: (0..n).map(|i| i as f64 * 0.25 - 1.0).collect(),
        shape,
        nsm: vec![0.5, -0.5],
        nsm_shape: [1, 1, 2],
        prompt: "a flower".into(),
    }
}

#[test]
fn frames_round_trip() {
    let msgs = [
        Message::Request(request(7, [2, 3, 3])),
        Message::Response {
            id: 7,
            shape: [1, 2, 1],
            eps: vec![0.5, 3.0],
        },
        Message::Error {
            id: None,
            message: "bad".into(),
        },
    ];
    let mut buf = Vec::new();
    for m in &msgs {
        write_message(&mut buf, m).unwrap();
    }
    let header_len = u32::from_le_bytes(buf[..4].try_into().unwrap()) as usize;
    let header: serde_json::Value = serde_json::from_slice(&buf[4..4 + header_len]).unwrap();
    assert_eq!(header["role"], "score_request");
    assert_eq!(header["nsm_shape"], serde_json::json!([1, 1, 2]));
    let mut r = buf.as_slice();
    for m in &msgs {
        assert_eq!(read_frame(&mut r).unwrap(), Some(Incoming::Message(m.clone())));
    }
    assert_eq!(read_frame(&mut r).unwrap(), None);
}

#[test]
fn truncated_frame_is_an_error() {
    let mut buf = Vec::new();
    write_message(&mut buf, &Message::Request(request(1, [2, 2, 3]))).unwrap();
    buf.truncate(buf.len() - 3);
    assert!(matches!(read_frame(&mut buf.as_slice()), Err(Error::Protocol(_))));
}

#[test]
fn echo_server_passes_conformance() {
    let (client, handle) = spawn_echo().unwrap();
    let report = conformance_run(client.try_clone().unwrap(), &client, 40, 100, [4, 5, 3], [2, 2, 3], 12).unwrap();
    assert!(report.passed(), "{report:?}");
    assert_eq!((report.valid_sent, report.malformed_sent), (40, 100));
    drop(client);
    let stats = handle.join().unwrap().unwrap();
    assert_eq!(stats.frames, 140);
    assert_eq!(stats.errors, 100);
}

#[test]
fn conformance_detects_a_broken_server() {
    struct Wrong;
    impl ScoreProvider for Wrong {
        fn capabilities(&self) -> Capabilities {
            Capabilities::default()
        }
        fn predict(&mut self, r: &ScoreRequest) -> Result<Vec<f64>> {
            if r.id % 3 == 0 {
                Err(Error::Provider("refused".into()))
            } else {
                Ok(r.z.clone())
            }
        }
    }
    let (client, _h) = spawn_in_process(Wrong).unwrap();
    let report = conformance_run(client.try_clone().unwrap(), &client, 10, 5, [2, 2, 1], [1, 1, 1], 1).unwrap();
    assert!(!report.passed());
}

#[test]
fn external_provider_over_tcp() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    std::thread::spawn(move || {
        let (s, _) = listener.accept().unwrap();
        serve(s.try_clone().unwrap(), s, &mut EchoProvider).unwrap();
    });
    let address: ProviderAddress = format!("tcp:{addr}").parse().unwrap();
    let mut p = ExternalProvider::connect(&address, Duration::from_secs(5)).unwrap();
    assert!(p.capabilities().remote);
    let req = request(3, [2, 2, 3]);
    let out = checked_predict(&mut p, &req).unwrap();
    assert_eq!(out, req.z);
}

#[test]
fn external_provider_deadline_and_stale_replies() {
    struct Slow;
    impl ScoreProvider for Slow {
        fn capabilities(&self) -> Capabilities {
            Capabilities::default()
        }
        fn predict(&mut self, r: &ScoreRequest) -> Result<Vec<f64>> {
            if r.id == 0 {
                std::thread::sleep(Duration::from_millis(400));
            }
            Ok(vec![r.id as f64; r.z.len()])
        }
    }
    let (client, _h) = spawn_in_process(Slow).unwrap();
    let mut p = ExternalProvider::from_streams(
        "slow".into(),
        Box::new(client.try_clone().unwrap()),
        Box::new(client),
        Duration::from_millis(100),
        None,
    );
    let start = Instant::now();
    let err = p.predict(&request(0, [1, 1, 3])).unwrap_err();
    assert!(err.to_string().contains("deadline"), "{err}");
    assert!(start.elapsed() < Duration::from_millis(350));
    std::thread::sleep(Duration::from_millis(400));
    let out = p.predict(&request(1, [1, 1, 3])).unwrap();
    assert_eq!(out, vec![1.0; 3]);
}

#[test]
fn provider_addresses_parse() {
    assert_eq!("tcp:localhost:9000".parse::<ProviderAddress>().unwrap(), ProviderAddress::Tcp("localhost:9000".into()));
    assert_eq!("unix:/tmp/p.sock".parse::<ProviderAddress>().unwrap(), ProviderAddress::Unix("/tmp/p.sock".into()));
    assert_eq!(
        "spawn:python3 -m bridge".parse::<ProviderAddress>().unwrap(),
        ProviderAddress::Spawn(vec!["python3".into(), "-m".into(), "bridge".into()])
    );
    assert!("ftp:x".parse::<ProviderAddress>().is_err());
    assert!("tcp:".parse::<ProviderAddress>().is_err());
    assert!("nothing".parse::<ProviderAddress>().is_err());
}

#[test]
fn template_denoiser_runs_through_echo_server() {
    let (client, _h) = spawn_echo().unwrap();
    let mut remote = ExternalProvider::from_streams(
        "echo".into(),
        Box::new(client.try_clone().unwrap()),
        Box::new(client),
        Duration::from_secs(5),
        None,
    );
    let s = schedule();
    let z: Vec<f64> = (0..12).map(|i| i as f64 * 0.125).collect();
    let den = ProviderDenoiser::new(&mut remote, vec![0.0; 4], [2, 2, 1]);
    let tau = 40;
    let out = consistency_denoise(&z, [2, 2, 3], "cond", tau, &s, &den, 0.5).unwrap();
    let (a, g) = (s.alpha(tau).unwrap(), s.sigma(tau).unwrap());
    for (o, zi) in out.iter().zip(&z) {
        let expected = c_skip(tau, 0.5) * zi + c_out(tau, 0.5) * (zi - g * zi) / a;
        assert!((o - expected).abs() < 1e-6, "{o} vs {expected}");
    }
}
