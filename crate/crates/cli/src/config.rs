//! Job configuration: a TOML document with strict schema, environment
//! overrides and config-relative paths.

use std::path::{Path, PathBuf};

use intrinsics4d::distill::DistillConfig;
use intrinsics4d::field4d::FieldConfig;
use intrinsics4d::renderer::RenderOptions;
use intrinsics4d::template::{FitConfig, TemplateConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Prefix of environment overrides, e.g. `I4D_DISTILL_RUN__LR_GRID=0.01`.
pub const ENV_PREFIX: &str = "I4D_";
const SECTIONS: [&str; 5] = ["field", "renderer", "template", "distill", "io"];

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JobConfig {
    /// Seeds field initialisation, rendering and distillation.
    pub seed: u64,
    pub field: FieldConfig,
    pub renderer: RendererSection,
    pub template: TemplateSection,
    pub distill: DistillSection,
    pub io: IoSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RendererSection {
    pub width: usize,
    pub height: usize,
    pub fov_y: f64,
    pub radius: f64,
    pub center: [f64; 3],
    /// Equirectangular EXR/HDR/PNG file; the procedural sky when absent.
    pub environment: Option<PathBuf>,
    pub environment_scale: f64,
    pub mesh_resolution: usize,
    pub options: RenderOptions,
}

impl Default for RendererSection {
    fn default() -> Self {
        RendererSection {
            width: 64,
            height: 64,
            fov_y: 0.7,
            radius: 3.0,
            center: [0.0; 3],
            environment: None,
            environment_scale: 1.0,
            mesh_resolution: 64,
            options: RenderOptions::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Asset {
    Sphere,
    Flower,
    Cube,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Motion {
    Rest,
    Bloom,
    Rotate,
    Translate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TemplateSection {
    /// Canonical OBJ mesh; the procedural `asset` when absent.
    pub canonical: Option<PathBuf>,
    pub asset: Asset,
    /// Procedural motion used when no flow file is given.
    pub motion: Motion,
    pub frames: usize,
    /// Flow targets from the canonical frame, one map per frame.
    pub flow: Option<PathBuf>,
    /// Viewpoint of the flow maps, in degrees.
    pub flow_azimuth_deg: f64,
    pub flow_elevation_deg: f64,
    pub fit: FitConfig,
    /// Orbit grid the PCA basis is fitted on.
    pub basis_azimuths: usize,
    pub basis_elevation_deg: f64,
    pub basis_timestamps: usize,
    pub maps: TemplateConfig,
}

impl Default for TemplateSection {
    fn default() -> Self {
        TemplateSection {
            canonical: None,
            asset: Asset::Sphere,
            motion: Motion::Bloom,
            frames: 8,
            flow: None,
            flow_azimuth_deg: 0.0,
            flow_elevation_deg: 20.0,
            fit: FitConfig::default(),
            basis_azimuths: 8,
            basis_elevation_deg: 20.0,
            basis_timestamps: 4,
            maps: TemplateConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefinerKind {
    Identity,
    Smoothing,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillSection {
    /// `analytic` or `external:ADDR`; the `--provider` flag overrides it.
    pub provider: String,
    /// Per-request deadline of external providers.
    pub deadline_ms: u64,
    pub refiner: RefinerKind,
    pub smoothing_sigma: f64,
    /// Loop settings; `run.seed` is replaced by the global seed.
    pub run: DistillConfig,
}

impl Default for DistillSection {
    fn default() -> Self {
        DistillSection {
            provider: "analytic".into(),
            deadline_ms: 30_000,
            refiner: RefinerKind::Smoothing,
            smoothing_sigma: 1.0,
            run: DistillConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoSection {
    pub out_dir: PathBuf,
    /// Field parameters read by `render`, `export-mesh` and `distill run`;
    /// a freshly initialised field when absent.
    pub checkpoint: Option<PathBuf>,
    /// Directory holding the output of `template fit`.
    pub template: Option<PathBuf>,
}

impl Default for IoSection {
    fn default() -> Self {
        IoSection {
            out_dir: PathBuf::from("out"),
            checkpoint: None,
            template: None,
        }
    }
}

impl JobConfig {
    /// Reads `path` (or the defaults), applies `env` overrides and resolves
    /// relative paths against the config file's directory.
    pub fn load(path: Option<&Path>, env: impl IntoIterator<Item = (String, String)>) -> Result<Self, CliError> {
        let (mut doc, base) = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", p.display())))?;
                let doc: toml::Table = toml::from_str(&text)
                    .map_err(|e| CliError::Validation(format!("config {}: {e}", p.display())))?;
                let base = p.parent().map(Path::to_path_buf).unwrap_or_default();
                (doc, base)
            }
            None => (toml::Table::new(), PathBuf::new()),
        };
        for (key, value) in env {
            if let Some(rest) = key.strip_prefix(ENV_PREFIX) {
                apply_override(&mut doc, rest, &value)?;
            }
        }
        let mut config: JobConfig = serde_path_to_error::deserialize(toml::Value::Table(doc))
            .map_err(|e| CliError::Validation(format!("config key `{}`: {}", e.path(), e.inner())))?;
        config.resolve_paths(&base);
        Ok(config)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.io.out_dir);
        for p in [
            &mut self.renderer.environment,
            &mut self.template.canonical,
            &mut self.template.flow,
            &mut self.io.checkpoint,
            &mut self.io.template,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Runtime(format!("cannot serialize config: {e}")))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.field.validate()?;
        self.renderer.options.validate()?;
        self.template.fit.validate()?;
        self.template.maps.validate()?;
        self.distill.run.validate()?;
        let r = &self.renderer;
        if r.width == 0 || r.height == 0 || !(r.radius > 0.0) || !(r.environment_scale >= 0.0) {
            return Err(CliError::Validation(
                "renderer width, height and radius must be positive and environment_scale nonnegative".into(),
            ));
        }
        if r.mesh_resolution < 2 {
            return Err(CliError::Validation("renderer.mesh_resolution must be at least 2".into()));
        }
        let t = &self.template;
        if t.frames < 2 || t.basis_azimuths == 0 || t.basis_timestamps == 0 {
            return Err(CliError::Validation(
                "template.frames must be at least 2 and the basis grid nonempty".into(),
            ));
        }
        let inputs = [
            ("renderer.environment", &self.renderer.environment),
            ("template.canonical", &self.template.canonical),
            ("template.flow", &self.template.flow),
            ("io.checkpoint", &self.io.checkpoint),
        ];
        for (key, path) in inputs {
            if let Some(p) = path.as_deref().filter(|p| !p.is_file()) {
                return Err(CliError::Validation(format!("config key `{key}`: no file at {}", p.display())));
            }
        }
        if let Some(p) = self.io.template.as_deref().filter(|p| !p.is_dir()) {
            return Err(CliError::Validation(format!("config key `io.template`: no directory at {}", p.display())));
        }
        if !(self.distill.smoothing_sigma > 0.0) {
            return Err(CliError::Validation("distill.smoothing_sigma must be positive".into()));
        }
        Ok(())
    }
}

/// Sets `SECTION_KEY` (or `SEED`) in `doc`. Keys are lowercased; `__`
/// descends into nested tables, so `DISTILL_RUN__LR_GRID` names
/// `distill.run.lr_grid`.
fn apply_override(doc: &mut toml::Table, name: &str, raw: &str) -> Result<(), CliError> {
    let name = name.to_ascii_lowercase();
    let path: Vec<String> = if name == "seed" {
        vec![name]
    } else {
        let (section, key) = name
            .split_once('_')
            .filter(|(s, k)| SECTIONS.contains(s) && !k.is_empty())
            .ok_or_else(|| {
                CliError::Validation(format!(
                    "environment override {ENV_PREFIX}{} does not name a section key",
                    name.to_ascii_uppercase()
                ))
            })?;
        std::iter::once(section.to_string()).chain(key.split("__").map(String::from)).collect()
    };
    let value = parse_value(raw);
    let (last, parents) = path.split_last().expect("nonempty path");
    let mut table = doc;
    for p in parents {
        let entry = table.entry(p.clone()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Validation(format!("config key `{}` is not a table", path.join("."))))?;
    }
    table.insert(last.clone(), value);
    Ok(())
}

/// TOML literal if `raw` parses as one, else a plain string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}
