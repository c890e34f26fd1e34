//! Ground-truth animated sphere for checking distillation end to end.
//!
//! The truth field renders its own targets at a grid of views and
//! timestamps; an analytic provider keyed by template state maps answers
//! every request with the nearest target. Distilled fields are scored at
//! views and timestamps between the grid points.

use serde::{Deserialize, Serialize};

use super::provider::{make_analytic_provider, AnalyticProvider, AnalyticTarget};
use super::run::DistillConfig;
use super::sampling::ViewSampling;
use crate::error::Result;
use crate::field4d::analytic::{AnalyticField, AnalyticMaterial, Shape};
use crate::field4d::{Field4DParams, FieldConfig};
use crate::math::{Aabb, Vec3};
use crate::renderer::{render_image, Background, CameraPose, EnvironmentMap, Orbit, RenderOptions};
use crate::template::assets::{blooming_sequence, uv_sphere};
use crate::template::{NeuralTemplate, StateMapSource, TemplateConfig, ToyEncoder};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleSpec {
    pub azimuths: usize,
    pub timestamps: usize,
    pub elevation_deg: f64,
    pub radius: f64,
    pub size: usize,
    /// Samples per pixel of target and evaluation renders.
    pub reference_spp: usize,
    pub iterations: usize,
    pub seed: u64,
    pub field: FieldConfig,
}

impl Default for OracleSpec {
    fn default() -> Self {
        OracleSpec {
            azimuths: 8,
            timestamps: 4,
            elevation_deg: 20.0,
            radius: 3.0,
            size: 32,
            reference_spp: 64,
            iterations: 2000,
            seed: 0,
            field: FieldConfig {
                plane_resolution: 16,
                plane_channels: 4,
                keyframes: 4,
                hash_levels: 4,
                log2_table_size: 10,
                level_channels: 2,
                base_resolution: 4,
                finest_resolution: 32,
                hidden_width: 16,
                hidden_layers: 2,
                ..FieldConfig::default()
            },
        }
    }
}

pub struct SphereOracle {
    pub spec: OracleSpec,
    pub truth: AnalyticField,
    pub env: EnvironmentMap,
    pub template: NeuralTemplate<ToyEncoder>,
    pub provider: AnalyticProvider,
    pub config: DistillConfig,
    /// Evaluation pairs: azimuths halfway between the grid's, at the grid
    /// timestamps and halfway between them.
    pub held_out: Vec<(CameraPose, f64)>,
}

/// Sphere of radius 0.6 growing to 0.75, red turning yellow.
pub fn animated_sphere() -> AnalyticField {
    AnalyticField::new(Aabb::default()).with(
        Shape::Sphere {
            center: Vec3::zeros(),
            r0: 0.6,
            r1: 0.75,
        },
        AnalyticMaterial {
            k_d0: [0.8, 0.1, 0.1],
            k_d1: [0.8, 0.7, 0.1],
            roughness: 0.6,
            metallic: 0.0,
        },
    )
}

impl SphereOracle {
    pub fn new(spec: OracleSpec) -> Result<Self> {
        spec.field.validate()?;
        let truth = animated_sphere();
        let env = EnvironmentMap::sky(64, 32);
        let views = ViewSampling {
            azimuth_deg: [0.0, 360.0],
            elevation_deg: [spec.elevation_deg; 2],
            radius: spec.radius,
            center: [0.0; 3],
            fov_y: 0.7,
            width: spec.size,
            height: spec.size,
        };
        let render = RenderOptions {
            samples_per_pixel: 4,
            shadows: false,
            background: Background::Environment,
            ..RenderOptions::default()
        };
        let config = DistillConfig {
            iterations: spec.iterations,
            seed: spec.seed,
            views,
            render,
            ..DistillConfig::default()
        };

        let sequence = blooming_sequence(
            uv_sphere(0.75, 12, 24, |d| [0.5 + 0.5 * d.x, 0.5 + 0.5 * d.y, 0.5 + 0.5 * d.z]),
            spec.timestamps.max(2),
            0.8,
        )?;
        let template_config = TemplateConfig {
            render_width: 64,
            render_height: 64,
            fov_y: views.fov_y,
            patch: 8,
            h_f: 8,
            w_f: 8,
            d_f: 3,
            ..TemplateConfig::default()
        };
        let orbit = |azimuth_deg: f64| Orbit {
            azimuth: azimuth_deg.to_radians(),
            elevation: spec.elevation_deg.to_radians(),
            radius: spec.radius,
            center: [0.0; 3],
        };
        let step = 360.0 / spec.azimuths as f64;
        let grid_views = (0..spec.azimuths)
            .map(|k| views.camera(&orbit(k as f64 * step)))
            .collect::<Result<Vec<_>>>()?;
        let grid_times: Vec<f64> = (0..spec.timestamps)
            .map(|k| k as f64 / (spec.timestamps.max(2) - 1) as f64)
            .collect();
        let template = NeuralTemplate::fit(sequence, ToyEncoder::default(), template_config, &grid_views, &grid_times)?;

        let reference = Self::reference_options(&spec);
        let mut targets = Vec::with_capacity(grid_views.len() * grid_times.len());
        for cam in &grid_views {
            for &t in &grid_times {
                targets.push(AnalyticTarget {
                    key: template.state_map(cam, t)?.grid,
                    prompt: String::new(),
                    image: render_image(&truth, cam, t, &env, &reference)?.rgb,
                });
            }
        }
        let provider = make_analytic_provider(targets, config.schedule.build()?)?;

        let mut held_times: Vec<f64> = grid_times.clone();
        held_times.extend(grid_times.windows(2).map(|w| 0.5 * (w[0] + w[1])));
        let mut held_out = Vec::new();
        for k in 0..spec.azimuths {
            let cam = views.camera(&orbit((k as f64 + 0.5) * step))?;
            for &t in &held_times {
                held_out.push((cam.clone(), t));
            }
        }
        Ok(SphereOracle {
            spec,
            truth,
            env,
            template,
            provider,
            config,
            held_out,
        })
    }

    fn reference_options(spec: &OracleSpec) -> RenderOptions {
        RenderOptions {
            samples_per_pixel: spec.reference_spp,
            shadows: false,
            seed: 0x5eed,
            ..RenderOptions::default()
        }
    }

    pub fn initial_field(&self) -> Result<Field4DParams> {
        Field4DParams::init(self.spec.field.clone(), self.spec.seed)
    }

    /// PSNR of `field` against the truth at every held-out pair.
    pub fn held_out_psnr(&self, field: &Field4DParams) -> Result<Vec<f64>> {
        let opts = Self::reference_options(&self.spec);
        self.held_out
            .iter()
            .map(|(cam, t)| {
                let truth = render_image(&self.truth, cam, *t, &self.env, &opts)?.rgb;
                let ours = render_image(field, cam, *t, &self.env, &opts)?.rgb;
                ours.psnr(&truth)
            })
            .collect()
    }
}
