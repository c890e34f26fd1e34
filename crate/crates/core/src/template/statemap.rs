//! Neural state maps: pooled, PCA-compressed features of template renders.

use serde::{Deserialize, Serialize};

use super::denoise::{consistency_denoise, Denoiser};
use super::encoder::{encode_features, FeatureEncoder};
use super::pca::{fit_pca, PcaBasis};
use super::raster::{render_template, TemplateShading};
use super::DeformableMeshSequence;
use crate::error::{Error, Result};
use crate::io::Image;
use crate::renderer::{CameraPose, Orbit};
use crate::schedule::NoiseSchedule;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TemplateConfig {
    pub render_width: usize,
    pub render_height: usize,
    pub fov_y: f64,
    pub patch: usize,
    pub h_f: usize,
    pub w_f: usize,
    pub d_f: usize,
    pub shading: TemplateShading,
}

impl Default for TemplateConfig {
    fn default() -> Self {
        TemplateConfig {
            render_width: 128,
            render_height: 128,
            fov_y: 0.7,
            patch: 8,
            h_f: 16,
            w_f: 16,
            d_f: 3,
            shading: TemplateShading::default(),
        }
    }
}

impl TemplateConfig {
    pub fn validate(&self) -> Result<()> {
        let (fw, fh) = (self.render_width / self.patch.max(1), self.render_height / self.patch.max(1));
        if self.patch < 2 || self.render_width % self.patch != 0 || self.render_height % self.patch != 0 || fw == 0 || fh == 0 {
            return Err(Error::InvalidConfig(format!(
                "render size {}x{} must be a positive multiple of the patch size {}",
                self.render_width, self.render_height, self.patch
            )));
        }
        if self.h_f == 0 || self.w_f == 0 || fh % self.h_f != 0 || fw % self.w_f != 0 {
            return Err(Error::InvalidConfig(format!(
                "feature grid {fw}x{fh} cannot be pooled to {}x{}",
                self.w_f, self.h_f
            )));
        }
        if self.d_f == 0 {
            return Err(Error::InvalidConfig("d_f must be positive".into()));
        }
        if !(self.fov_y > 0.0 && self.fov_y < std::f64::consts::PI) {
            return Err(Error::InvalidConfig(format!("fov_y {} outside (0, pi)", self.fov_y)));
        }
        Ok(())
    }

    pub fn camera(&self, orbit: &Orbit) -> Result<CameraPose> {
        CameraPose::orbit(orbit, self.fov_y, self.render_width, self.render_height)
    }
}

/// Optional consistency-model pass applied to the template render.
pub struct DenoiseOptions<'a> {
    pub denoiser: &'a dyn Denoiser,
    pub schedule: &'a NoiseSchedule,
    pub tau: usize,
    pub condition: &'a str,
    pub sigma_data: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NeuralStateMap {
    /// `H_F x W_F x d_F` grid.
    pub grid: Image,
    pub view: CameraPose,
    pub t: f64,
}

impl NeuralStateMap {
    pub fn shape(&self) -> [usize; 3] {
        self.grid.shape()
    }

    pub fn distance(&self, other: &NeuralStateMap) -> f64 {
        self.grid
            .data
            .iter()
            .zip(&other.grid.data)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

/// Renders the template at `(view, t)` with the view's pose and field of
/// view at the configured resolution, optionally denoises it, encodes it,
/// projects every cell on `basis` and average-pools to `H_F x W_F`.
pub fn neural_state_map(
    seq: &DeformableMeshSequence,
    view: &CameraPose,
    t: f64,
    encoder: &dyn FeatureEncoder,
    basis: &PcaBasis,
    denoise: Option<&DenoiseOptions<'_>>,
    config: &TemplateConfig,
) -> Result<NeuralStateMap> {
    config.validate()?;
    if basis.dim() != config.d_f {
        return Err(Error::InvalidConfig(format!(
            "basis has {} components but d_f is {}",
            basis.dim(),
            config.d_f
        )));
    }
    let mut img = template_render(seq, view, t, config)?;
    if let Some(d) = denoise {
        let shape = img.shape();
        img.data = consistency_denoise(&img.data, shape, d.condition, d.tau, d.schedule, d.denoiser, d.sigma_data)?;
    }
    let feat = encode_features(&img, encoder)?;
    let proj = basis.project_map(&feat)?;
    let grid = average_pool(&proj, config.w_f, config.h_f);
    if grid.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            array: "neural state map".into(),
        });
    }
    Ok(NeuralStateMap {
        grid,
        view: view.clone(),
        t,
    })
}

fn template_render(seq: &DeformableMeshSequence, view: &CameraPose, t: f64, config: &TemplateConfig) -> Result<Image> {
    let cam = view.resized(config.render_width, config.render_height);
    render_template(seq, &cam, t, &config.shading)
}

fn average_pool(map: &Image, w: usize, h: usize) -> Image {
    let (fx, fy) = (map.width / w, map.height / h);
    let mut out = Image::new(w, h, map.channels);
    let n = (fx * fy) as f64;
    for y in 0..map.height {
        for x in 0..map.width {
            let src = map.pixel(x, y).to_vec();
            for (d, s) in out.pixel_mut(x / fx, y / fy).iter_mut().zip(src) {
                *d += s / n;
            }
        }
    }
    out
}

/// Source of conditioning maps for arbitrary `(view, t)`.
pub trait StateMapSource {
    fn state_map(&self, view: &CameraPose, t: f64) -> Result<NeuralStateMap>;
    /// `[H_F, W_F, d_F]`.
    fn map_shape(&self) -> [usize; 3];
}

/// A fitted template: sequence, encoder and PCA basis.
pub struct NeuralTemplate<E> {
    pub seq: DeformableMeshSequence,
    pub encoder: E,
    pub basis: PcaBasis,
    pub config: TemplateConfig,
}

impl<E: FeatureEncoder> NeuralTemplate<E> {
    /// Fits the PCA basis on template renders at every `(view, t)` pair.
    pub fn fit(
        seq: DeformableMeshSequence,
        encoder: E,
        config: TemplateConfig,
        views: &[CameraPose],
        times: &[f64],
    ) -> Result<Self> {
        config.validate()?;
        seq.validate()?;
        if encoder.patch() != config.patch {
            return Err(Error::InvalidConfig(format!(
                "encoder patch {} differs from configured patch {}",
                encoder.patch(),
                config.patch
            )));
        }
        let mut maps = Vec::with_capacity(views.len() * times.len());
        for view in views {
            for &t in times {
                maps.push(encode_features(&template_render(&seq, view, t, &config)?, &encoder)?);
            }
        }
        let basis = fit_pca(&maps, config.d_f)?;
        Ok(NeuralTemplate {
            seq,
            encoder,
            basis,
            config,
        })
    }

    /// Uniform fitting grid: `azimuths` evenly spaced orbits at `elevation`
    /// and `times` evenly spaced timestamps in `[0, 1]`.
    pub fn fit_grid(
        config: &TemplateConfig,
        radius: f64,
        elevation: f64,
        azimuths: usize,
        times: usize,
    ) -> Result<(Vec<CameraPose>, Vec<f64>)> {
        let views = (0..azimuths)
            .map(|k| {
                config.camera(&Orbit {
                    azimuth: 2.0 * std::f64::consts::PI * k as f64 / azimuths as f64,
                    elevation,
                    radius,
                    center: [0.0; 3],
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let ts = (0..times)
            .map(|k| if times < 2 { 0.0 } else { k as f64 / (times - 1) as f64 })
            .collect();
        Ok((views, ts))
    }
}

impl<E: FeatureEncoder> StateMapSource for NeuralTemplate<E> {
    fn state_map(&self, view: &CameraPose, t: f64) -> Result<NeuralStateMap> {
        neural_state_map(&self.seq, view, t, &self.encoder, &self.basis, None, &self.config)
    }

    fn map_shape(&self) -> [usize; 3] {
        [self.config.h_f, self.config.w_f, self.config.d_f]
    }
}
