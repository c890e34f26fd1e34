//! Job implementations behind each subcommand.

use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Duration;

use intrinsics4d::distill::oracle::{OracleSpec, SphereOracle};
use intrinsics4d::distill::{
    checkpoint_hash, run_distillation, ExternalProvider, IdentityRefiner, IterationStatus, NdjsonObserver,
    ProviderAddress, ScoreProvider, TemporalSmoothing, VideoRefiner,
};
use intrinsics4d::field4d::Field4DParams;
use intrinsics4d::io::tensorfile::{self, NamedArray};
use intrinsics4d::io::{flow, obj};
use intrinsics4d::math::Vec3;
use intrinsics4d::mesh::TriMesh;
use intrinsics4d::renderer::{marching_cubes, render_image, CameraPose, EnvironmentMap, Orbit};
use intrinsics4d::template::assets::{
    blooming_sequence, flower_proxy, rotating_sequence, translating_sequence, unit_cube, uv_sphere,
};
use intrinsics4d::template::{
    fit_deformation, neural_state_map, DeformableMeshSequence, FlowTarget, NeuralTemplate, PcaBasis, StateMapSource,
    ToyEncoder,
};
use serde_json::json;

use crate::config::{Asset, JobConfig, Motion, RefinerKind};
use crate::error::CliError;
use crate::manifest::Outputs;

pub const SEQUENCE_FILE: &str = "template_sequence.i4d";
pub const BASIS_FILE: &str = "template_basis.i4d";

/// Orbit viewpoint given as `azimuth=DEG,elev=DEG[,radius=R]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Viewpoint {
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
    pub radius: Option<f64>,
}

impl FromStr for Viewpoint {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (mut az, mut el, mut radius) = (None, None, None);
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part.split_once('=').ok_or_else(|| format!("`{part}` is not KEY=VALUE"))?;
            let v: f64 = v.trim().parse().map_err(|_| format!("`{v}` is not a number"))?;
            if !v.is_finite() {
                return Err(format!("`{k}` must be finite"));
            }
            match k.trim() {
                "azimuth" | "az" => az = Some(v),
                "elev" | "elevation" | "el" => el = Some(v),
                "radius" | "r" => radius = Some(v),
                other => return Err(format!("unknown viewpoint key `{other}`")),
            }
        }
        Ok(Viewpoint {
            azimuth_deg: az.ok_or("viewpoint needs azimuth=DEG")?,
            elevation_deg: el.unwrap_or(0.0),
            radius,
        })
    }
}

pub fn parse_time(s: &str) -> Result<f64, String> {
    let t: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if (0.0..=1.0).contains(&t) {
        Ok(t)
    } else {
        Err(format!("time {t} outside [0, 1]"))
    }
}

/// Resolved settings shared by every job.
pub struct Job {
    pub config: JobConfig,
    pub config_text: String,
    pub command: String,
}

impl Job {
    fn outputs(&self) -> Result<Outputs, CliError> {
        let c = &self.config;
        let reads_template = self.command != "template fit";
        let inputs = [&c.io.checkpoint, &c.renderer.environment, &c.template.canonical, &c.template.flow]
            .into_iter()
            .flatten()
            .cloned()
            .chain(
                self.template_dir()
                    .ok()
                    .filter(|_| reads_template)
                    .into_iter()
                    .flat_map(|d| [d.join(SEQUENCE_FILE), d.join(BASIS_FILE)]),
            )
            .collect();
        Outputs::create(&c.io.out_dir, inputs)
    }

    fn finish(&self, out: Outputs, summary: serde_json::Value) -> Result<(), CliError> {
        let manifest = out.finish(&self.command, &self.config_text, self.config.seed, summary)?;
        println!("{}", serde_json::to_string(&manifest.summary)?);
        Ok(())
    }

    fn environment(&self) -> Result<EnvironmentMap, CliError> {
        let r = &self.config.renderer;
        let env = match &r.environment {
            Some(p) => EnvironmentMap::load(p)?,
            None => EnvironmentMap::sky(64, 32),
        };
        Ok(env.scaled(r.environment_scale))
    }

    fn camera(&self, xi: &Viewpoint) -> Result<CameraPose, CliError> {
        let r = &self.config.renderer;
        let orbit = Orbit {
            azimuth: xi.azimuth_deg.to_radians(),
            elevation: xi.elevation_deg.to_radians(),
            radius: xi.radius.unwrap_or(r.radius),
            center: r.center,
        };
        Ok(CameraPose::orbit(&orbit, r.fov_y, r.width, r.height)?)
    }

    fn field(&self) -> Result<Field4DParams, CliError> {
        Ok(match &self.config.io.checkpoint {
            Some(p) => Field4DParams::load(p)?,
            None => Field4DParams::init(self.config.field.clone(), self.config.seed)?,
        })
    }

    fn template_dir(&self) -> Result<PathBuf, CliError> {
        Ok(self.config.io.template.clone().unwrap_or_else(|| self.config.io.out_dir.clone()))
    }

    fn load_template(&self) -> Result<NeuralTemplate<ToyEncoder>, CliError> {
        let dir = self.template_dir()?;
        let (seq_path, basis_path) = (dir.join(SEQUENCE_FILE), dir.join(BASIS_FILE));
        if !seq_path.is_file() || !basis_path.is_file() {
            return Err(CliError::Validation(format!(
                "no fitted template in {}; run `template fit` or set io.template",
                dir.display()
            )));
        }
        let maps = self.config.template.maps;
        Ok(NeuralTemplate {
            seq: DeformableMeshSequence::load(&seq_path)?,
            encoder: ToyEncoder { patch: maps.patch },
            basis: PcaBasis::load(&basis_path)?,
            config: maps,
        })
    }
}

fn canonical_mesh(config: &JobConfig) -> Result<TriMesh, CliError> {
    if let Some(p) = &config.template.canonical {
        return Ok(obj::read(p)?);
    }
    Ok(match config.template.asset {
        Asset::Sphere => uv_sphere(0.75, 12, 24, |d| [0.5 + 0.5 * d.x, 0.5 + 0.5 * d.y, 0.5 + 0.5 * d.z]),
        Asset::Flower => flower_proxy(0.6, 5, 12, 24),
        Asset::Cube => unit_cube(std::array::from_fn(|i| {
            [(i & 1) as f64, ((i >> 1) & 1) as f64, ((i >> 2) & 1) as f64]
        })),
    })
}

pub fn template_fit(job: &Job) -> Result<(), CliError> {
    let c = &job.config;
    let t = &c.template;
    let canonical = canonical_mesh(c)?;
    let mut out = job.outputs()?;
    let (seq, losses) = match &t.flow {
        Some(path) => {
            let maps = flow::read(path)?;
            let frames = maps.len();
            let orbit = Orbit {
                azimuth: t.flow_azimuth_deg.to_radians(),
                elevation: t.flow_elevation_deg.to_radians(),
                radius: c.renderer.radius,
                center: c.renderer.center,
            };
            let targets = maps
                .into_iter()
                .enumerate()
                .filter(|(k, _)| *k != t.fit.canonical_frame)
                .map(|(frame, map)| {
                    let camera = CameraPose::orbit(&orbit, c.renderer.fov_y, map.width, map.height)?;
                    Ok(FlowTarget {
                        frame,
                        camera,
                        flow: map,
                        silhouette: None,
                    })
                })
                .collect::<intrinsics4d::Result<Vec<_>>>()?;
            let (seq, report) = fit_deformation(&canonical, frames, &targets, &t.fit)?;
            (seq, Some((report.initial_loss(), report.final_loss())))
        }
        None => {
            let seq = match t.motion {
                Motion::Rest => DeformableMeshSequence::rest(canonical, t.frames)?,
                Motion::Bloom => blooming_sequence(canonical, t.frames, 0.8)?,
                Motion::Rotate => rotating_sequence(canonical, t.frames, Vec3::y(), std::f64::consts::FRAC_PI_2)?,
                Motion::Translate => translating_sequence(canonical, t.frames, Vec3::new(0.3, 0.0, 0.0))?,
            };
            (seq, None)
        }
    };
    let (views, times) = NeuralTemplate::<ToyEncoder>::fit_grid(
        &t.maps,
        c.renderer.radius,
        t.basis_elevation_deg.to_radians(),
        t.basis_azimuths,
        t.basis_timestamps,
    )?;
    let frames = seq.frames();
    let template = NeuralTemplate::fit(seq, ToyEncoder { patch: t.maps.patch }, t.maps, &views, &times)?;
    template.seq.save(&out.artifact(SEQUENCE_FILE)?)?;
    template.basis.save(&out.artifact(BASIS_FILE)?)?;
    obj::write(&out.artifact("template_canonical.obj")?, &template.seq.canonical)?;
    let summary = json!({
        "frames": frames,
        "vertices": template.seq.canonical.vertices.len(),
        "basis_dim": template.basis.dim(),
        "fit_loss": losses.map(|(a, b)| json!({ "initial": a, "final": b })),
    });
    job.finish(out, summary)
}

pub fn template_statemap(job: &Job, xi: &Viewpoint, t: f64) -> Result<(), CliError> {
    let template = job.load_template()?;
    let camera = job.camera(xi)?;
    let mut out = job.outputs()?;
    let map = neural_state_map(&template.seq, &camera, t, &template.encoder, &template.basis, None, &template.config)?;
    let shape = map.shape();
    let meta = json!({
        "kind": "neural_state_map",
        "azimuth_deg": xi.azimuth_deg,
        "elevation_deg": xi.elevation_deg,
        "t": t,
    });
    let arrays = [NamedArray::f64("state_map", shape.to_vec(), map.grid.data.clone())];
    tensorfile::write(&out.artifact("statemap.i4d")?, &meta, &arrays)?;
    job.finish(out, json!({ "shape": shape, "t": t }))
}

pub fn render(job: &Job, xi: &Viewpoint, t: f64) -> Result<(), CliError> {
    let field = job.field()?;
    let env = job.environment()?;
    let camera = job.camera(xi)?;
    let mut opts = job.config.renderer.options;
    opts.seed = job.config.seed;
    let mut out = job.outputs()?;
    let img = render_image(&field, &camera, t, &env, &opts)?;
    img.rgb.write_png(&out.artifact("render_rgb.png")?)?;
    img.rgb.write_exr(&out.artifact("render_rgb.exr")?)?;
    img.albedo.write_png(&out.artifact("render_albedo.png")?)?;
    let mut normal = img.normal.clone();
    normal.data.iter_mut().for_each(|v| *v = 0.5 + 0.5 * *v);
    normal.write_png(&out.artifact("render_normal.png")?)?;
    let [h, w] = [camera.height, camera.width];
    let arrays = [
        NamedArray::f64("rgb", vec![h, w, 3], img.rgb.data.clone()),
        NamedArray::f64("albedo", vec![h, w, 3], img.albedo.data.clone()),
        NamedArray::f64("normal", vec![h, w, 3], img.normal.data.clone()),
        NamedArray::f64("roughness", vec![h, w], img.roughness.data.clone()),
        NamedArray::f64("metallic", vec![h, w], img.metallic.data.clone()),
        NamedArray::f64("visibility", vec![h, w], img.visibility.data.clone()),
        NamedArray::f64("alpha", vec![h, w], img.alpha.data.clone()),
    ];
    let meta = json!({ "kind": "render_aovs", "azimuth_deg": xi.azimuth_deg, "elevation_deg": xi.elevation_deg, "t": t });
    tensorfile::write(&out.artifact("render_aovs.i4d")?, &meta, &arrays)?;
    let coverage = img.alpha.data.iter().sum::<f64>() / img.alpha.data.len() as f64;
    job.finish(out, json!({ "width": w, "height": h, "t": t, "coverage": coverage }))
}

pub fn export_mesh(job: &Job, t: f64, resolution: Option<usize>) -> Result<(), CliError> {
    let field = job.field()?;
    let res = resolution.unwrap_or(job.config.renderer.mesh_resolution);
    if res < 2 {
        return Err(CliError::Validation("mesh resolution must be at least 2".into()));
    }
    let mut out = job.outputs()?;
    let mesh = marching_cubes(&field, t, res)?;
    obj::write(&out.artifact("mesh.obj")?, &mesh)?;
    let summary = json!({
        "t": t,
        "resolution": res,
        "vertices": mesh.vertices.len(),
        "faces": mesh.faces.len(),
    });
    job.finish(out, summary)
}

/// `analytic` or `external:ADDR`.
pub enum ProviderChoice {
    Analytic,
    External(ProviderAddress),
}

impl FromStr for ProviderChoice {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        if s == "analytic" {
            return Ok(ProviderChoice::Analytic);
        }
        match s.strip_prefix("external:") {
            Some(addr) => Ok(ProviderChoice::External(addr.parse()?)),
            None => Err(CliError::Validation(format!(
                "provider `{s}` must be `analytic` or `external:ADDR`"
            ))),
        }
    }
}

pub fn distill_run(job: &Job) -> Result<(), CliError> {
    let c = &job.config;
    let mut run = c.distill.run.clone();
    run.seed = c.seed;
    let choice: ProviderChoice = c.distill.provider.parse()?;
    let field = job.field()?;
    let env = job.environment()?;
    let refiner: Box<dyn VideoRefiner> = match c.distill.refiner {
        RefinerKind::Identity => Box::new(IdentityRefiner),
        RefinerKind::Smoothing => Box::new(TemporalSmoothing {
            sigma: c.distill.smoothing_sigma,
        }),
    };

    let mut oracle = None;
    let mut external = None;
    let mut fitted = None;
    let (template, provider): (&dyn StateMapSource, &mut dyn ScoreProvider) = match choice {
        ProviderChoice::Analytic => {
            let spec = oracle_spec(c, &run)?;
            let o: &mut SphereOracle = oracle.insert(SphereOracle::new(spec)?);
            (&o.template, &mut o.provider)
        }
        ProviderChoice::External(addr) => {
            let t = fitted.insert(job.load_template()?);
            let deadline = Duration::from_millis(c.distill.deadline_ms);
            let p = external.insert(ExternalProvider::connect(&addr, deadline).map_err(|e| {
                CliError::Runtime(format!("cannot reach provider {addr}: {e}"))
            })?);
            (&*t, p)
        }
    };

    let mut out = job.outputs()?;
    let metrics_path = out.artifact("metrics.ndjson")?;
    let mut observer = NdjsonObserver {
        writer: BufWriter::new(File::create(&metrics_path)?),
        checkpoint_dir: (run.checkpoint_every > 0).then(|| out.dir().join("checkpoints")),
    };
    let (field, log) = run_distillation(field, template, provider, refiner.as_ref(), &env, &run, &mut observer)?;
    drop(observer);
    field.save(&out.artifact("field.i4d")?)?;
    out.register_dir("checkpoints")?;

    let count = |s: IterationStatus| log.iter().filter(|m| m.status == s).count();
    let mut summary = json!({
        "iterations": log.len(),
        "applied": count(IterationStatus::Applied),
        "skipped": count(IterationStatus::Skipped),
        "rejected": count(IterationStatus::Rejected),
        "checkpoint_sha256": checkpoint_hash(&field),
    });
    if let Some(o) = &oracle {
        let psnr = o.held_out_psnr(&field)?;
        summary["held_out_psnr_mean"] = json!(psnr.iter().sum::<f64>() / psnr.len() as f64);
    }
    job.finish(out, summary)
}

/// Ground-truth sphere oracle matched to the job's views and field.
fn oracle_spec(c: &JobConfig, run: &intrinsics4d::distill::DistillConfig) -> Result<OracleSpec, CliError> {
    let v = &run.views;
    if v.width != v.height {
        return Err(CliError::Validation(format!(
            "the analytic provider renders square targets; distill.run.views is {}x{}",
            v.width, v.height
        )));
    }
    Ok(OracleSpec {
        elevation_deg: 0.5 * (v.elevation_deg[0] + v.elevation_deg[1]),
        radius: v.radius,
        size: v.width,
        iterations: run.iterations,
        seed: c.seed,
        field: c.field.clone(),
        ..OracleSpec::default()
    })
}
