//! Hybrid 4D intrinsics field.
//!
//! Low-frequency features come from six feature planes over coordinate pairs
//! of `(x, y, z, t)`, fused by elementwise product. High-frequency features
//! come from one multiresolution hash grid per keyframe, blended linearly
//! between the two keyframes around the query time. The concatenated feature
//! feeds a signed-distance head (which also sees the normalised position and
//! carries an explicit sphere skip term) and a material head whose outputs are
//! squashed to `[0, 1]`.

pub mod analytic;
pub mod encoding;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradtape::{ParamId, ParamSet, Tape, Tensor, Var};
use crate::io::tensorfile::{self, NamedArray};
use crate::math::{Aabb, Vec3};

use encoding::{hash_corners, keyframe_interval, level_resolutions, plane_corners, PLANE_AXES, PLANE_NAMES};

/// Number of material outputs: `k_d` (3) and `k_orm` (3).
pub const MATERIAL_CHANNELS: usize = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FieldConfig {
    /// Nodes per side of every feature plane.
    pub plane_resolution: usize,
    pub plane_channels: usize,
    pub keyframes: usize,
    pub hash_levels: usize,
    pub log2_table_size: u32,
    pub level_channels: usize,
    pub base_resolution: usize,
    pub finest_resolution: usize,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub softplus_beta: f64,
    /// Initial sphere radius as a fraction of the scene extent.
    pub init_radius_fraction: f64,
    pub bounds: Aabb,
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig {
            plane_resolution: 64,
            plane_channels: 16,
            keyframes: 8,
            hash_levels: 8,
            log2_table_size: 16,
            level_channels: 2,
            base_resolution: 16,
            finest_resolution: 256,
            hidden_width: 64,
            hidden_layers: 2,
            softplus_beta: 10.0,
            init_radius_fraction: 0.35,
            bounds: Aabb::default(),
        }
    }
}

impl FieldConfig {
    /// A small configuration for tests and quick experiments.
    pub fn tiny() -> Self {
        FieldConfig {
            plane_resolution: 8,
            plane_channels: 4,
            keyframes: 3,
            hash_levels: 2,
            log2_table_size: 8,
            level_channels: 2,
            base_resolution: 4,
            finest_resolution: 8,
            hidden_width: 8,
            hidden_layers: 2,
            ..FieldConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        self.bounds.validate()?;
        if self.keyframes < 2 {
            return bad(format!("field.keyframes must be at least 2, got {}", self.keyframes));
        }
        if self.plane_resolution < 2 {
            return bad(format!("field.plane_resolution must be at least 2, got {}", self.plane_resolution));
        }
        for (name, v) in [
            ("plane_channels", self.plane_channels),
            ("hash_levels", self.hash_levels),
            ("level_channels", self.level_channels),
            ("base_resolution", self.base_resolution),
            ("finest_resolution", self.finest_resolution),
            ("hidden_width", self.hidden_width),
        ] {
            if v == 0 {
                return bad(format!("field.{name} must be positive"));
            }
        }
        if self.log2_table_size == 0 || self.log2_table_size > 24 {
            return bad(format!("field.log2_table_size must be in 1..=24, got {}", self.log2_table_size));
        }
        if self.finest_resolution < self.base_resolution {
            return bad("field.finest_resolution must be >= field.base_resolution".into());
        }
        if !(self.softplus_beta > 0.0) {
            return bad("field.softplus_beta must be positive".into());
        }
        let r0 = self.init_radius();
        let half_min = 0.5 * self.bounds.size().min();
        if !(r0 > 0.0) || r0 >= half_min {
            return bad(format!(
                "initial radius {r0} must lie inside the bounds (0 < r0 < {half_min})"
            ));
        }
        Ok(())
    }

    pub fn init_radius(&self) -> f64 {
        self.init_radius_fraction * self.bounds.extent()
    }

    pub fn table_size(&self) -> usize {
        1 << self.log2_table_size
    }

    pub fn low_dim(&self) -> usize {
        self.plane_channels
    }

    pub fn high_dim(&self) -> usize {
        self.hash_levels * self.level_channels
    }

    pub fn level_resolutions(&self) -> Vec<usize> {
        level_resolutions(self.hash_levels, self.base_resolution, self.finest_resolution)
    }
}

/// Query location in space-time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpaceTimePoint {
    pub x: Vec3,
    pub t: f64,
}

impl SpaceTimePoint {
    pub fn new(x: Vec3, t: f64) -> Self {
        SpaceTimePoint { x, t }
    }
}

/// Signed distance and material at one point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FieldSample {
    pub sdf: f64,
    pub k_d: [f64; 3],
    /// `(o, r, m)`; `o` is carried but never read by the renderer.
    pub k_orm: [f64; 3],
}

impl FieldSample {
    pub fn roughness(&self) -> f64 {
        self.k_orm[1]
    }

    pub fn metallic(&self) -> f64 {
        self.k_orm[2]
    }
}

/// Anything the renderer can trace and shade.
pub trait IntrinsicField: Sync {
    fn bounds(&self) -> Aabb;
    fn sdf_batch(&self, points: &[SpaceTimePoint]) -> Result<Vec<f64>>;
    fn sample_batch(&self, points: &[SpaceTimePoint]) -> Result<Vec<FieldSample>>;

    fn sdf(&self, p: SpaceTimePoint) -> Result<f64> {
        Ok(self.sdf_batch(&[p])?[0])
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Layer {
    fan_in: usize,
    fan_out: usize,
    weight: Vec<f64>,
    bias: Vec<f64>,
}

/// All learnable parameters of the field.
#[derive(Clone, Debug, PartialEq)]
pub struct Field4DParams {
    config: FieldConfig,
    keyframe_times: Vec<f64>,
    planes: Vec<Vec<f64>>,
    hash: Vec<f64>,
    sdf_head: Vec<Layer>,
    mat_head: Vec<Layer>,
    names: Vec<String>,
}

/// Tape handles produced by [`Field4DParams::record`].
#[derive(Clone, Copy, Debug)]
pub struct FieldVars {
    /// `B x 1` signed distances.
    pub sdf: Option<Var>,
    /// `B x 6` squashed material `(k_d, k_orm)`.
    pub material: Option<Var>,
    /// How many query points were clamped into the bounds.
    pub clamped: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Heads {
    pub sdf: bool,
    pub material: bool,
}

impl Heads {
    pub const SDF: Heads = Heads {
        sdf: true,
        material: false,
    };
    pub const MATERIAL: Heads = Heads {
        sdf: false,
        material: true,
    };
    pub const BOTH: Heads = Heads {
        sdf: true,
        material: true,
    };
}

fn make_head(rng: &mut ChaCha8Rng, dims: &[usize], last_scale: f64) -> Vec<Layer> {
    let n = dims.len() - 1;
    (0..n)
        .map(|i| {
            let (fan_in, fan_out) = (dims[i], dims[i + 1]);
            let mut a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            if i == n - 1 {
                a *= last_scale;
            }
            Layer {
                fan_in,
                fan_out,
                weight: (0..fan_in * fan_out).map(|_| rng.gen_range(-a..a)).collect(),
                bias: vec![0.0; fan_out],
            }
        })
        .collect()
}

impl Field4DParams {
    /// Initialises all parameters deterministically from `seed`.
    ///
    /// Planes start at `1 + U(-0.05, 0.05)` so their product is close to one,
    /// hash entries at `U(-1e-4, 1e-4)`, and the signed-distance head's last
    /// layer is scaled down so the field starts as a sphere of the configured
    /// radius through the skip term.
    pub fn init(config: FieldConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = config.plane_resolution;
        let planes = (0..6)
            .map(|_| {
                (0..r * r * config.plane_channels)
                    .map(|_| 1.0 + rng.gen_range(-0.05..0.05))
                    .collect()
            })
            .collect();
        let hash_len = config.keyframes * config.hash_levels * config.table_size() * config.level_channels;
        let hash = (0..hash_len).map(|_| rng.gen_range(-1e-4..1e-4)).collect();
        let feat = config.low_dim() + config.high_dim();
        let hidden = vec![config.hidden_width; config.hidden_layers];
        let sdf_dims: Vec<usize> = std::iter::once(feat + 3).chain(hidden.iter().copied()).chain([1]).collect();
        let mat_dims: Vec<usize> = std::iter::once(feat)
            .chain(hidden.iter().copied())
            .chain([MATERIAL_CHANNELS])
            .collect();
        let sdf_head = make_head(&mut rng, &sdf_dims, 0.01);
        let mat_head = make_head(&mut rng, &mat_dims, 1.0);
        let k = config.keyframes;
        let keyframe_times = (0..k).map(|i| i as f64 / (k - 1) as f64).collect();
        Ok(Self::assemble(config, keyframe_times, planes, hash, sdf_head, mat_head))
    }

    fn assemble(
        config: FieldConfig,
        keyframe_times: Vec<f64>,
        planes: Vec<Vec<f64>>,
        hash: Vec<f64>,
        sdf_head: Vec<Layer>,
        mat_head: Vec<Layer>,
    ) -> Self {
        let mut names: Vec<String> = PLANE_NAMES.iter().map(|s| s.to_string()).collect();
        names.push("hash".into());
        for (prefix, head) in [("sdf_mlp", &sdf_head), ("mat_mlp", &mat_head)] {
            for i in 0..head.len() {
                names.push(format!("{prefix}.{i}.weight"));
                names.push(format!("{prefix}.{i}.bias"));
            }
        }
        Field4DParams {
            config,
            keyframe_times,
            planes,
            hash,
            sdf_head,
            mat_head,
            names,
        }
    }

    pub fn config(&self) -> &FieldConfig {
        &self.config
    }

    pub fn keyframe_times(&self) -> &[f64] {
        &self.keyframe_times
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        &self.planes[c]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        &mut self.planes[c]
    }

    pub fn hash_table(&self) -> &[f64] {
        &self.hash
    }

    pub fn hash_table_mut(&mut self) -> &mut [f64] {
        &mut self.hash
    }

    /// Offset of entry `entry` of level `level` for keyframe `key` in the
    /// flattened hash array.
    pub fn hash_row(&self, key: usize, level: usize, entry: usize) -> usize {
        (key * self.config.hash_levels + level) * self.config.table_size() + entry
    }

    pub const HASH_ID: ParamId = ParamId(6);

    pub fn plane_id(c: usize) -> ParamId {
        ParamId(c)
    }

    /// Whether a parameter array belongs to a feature grid (planes or hash)
    /// rather than an MLP head.
    pub fn is_grid(id: ParamId) -> bool {
        id.0 <= Self::HASH_ID.0
    }

    fn layer_ref(&self, id: ParamId) -> Option<(&Layer, bool)> {
        let i = id.0.checked_sub(7)?;
        let n_sdf = 2 * self.sdf_head.len();
        if i < n_sdf {
            Some((&self.sdf_head[i / 2], i % 2 == 0))
        } else {
            let j = i - n_sdf;
            self.mat_head.get(j / 2).map(|l| (l, j % 2 == 0))
        }
    }

    fn head_ids(&self, sdf: bool) -> Vec<(ParamId, ParamId)> {
        let start = if sdf { 7 } else { 7 + 2 * self.sdf_head.len() };
        let n = if sdf { self.sdf_head.len() } else { self.mat_head.len() };
        (0..n).map(|i| (ParamId(start + 2 * i), ParamId(start + 2 * i + 1))).collect()
    }

    fn check_heads(&self, heads: Heads) -> Result<()> {
        let mut ids = Vec::new();
        if heads.sdf {
            ids.extend(self.head_ids(true));
        }
        if heads.material {
            ids.extend(self.head_ids(false));
        }
        for (w, b) in ids {
            for id in [w, b] {
                if self.leaf(id).iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite {
                        array: self.leaf_name(id).to_string(),
                    });
                }
            }
        }
        Ok(())
    }

    /// Records the low-frequency plane feature of every point (`B x d_low`).
    pub fn record_plane_feature<'a>(&'a self, tape: &mut Tape<'a>, points: &[SpaceTimePoint]) -> Result<Var> {
        let res = self.config.plane_resolution;
        let d = self.config.plane_channels;
        let mut acc: Option<Var> = None;
        for (c, &(a, b)) in PLANE_AXES.iter().enumerate() {
            let mut rows = Vec::with_capacity(points.len() * 4);
            let mut weights = Vec::with_capacity(points.len() * 4);
            for p in points {
                let u = self.config.bounds.normalize(&p.x);
                let coord = [u[0], u[1], u[2], p.t];
                for (r, w) in plane_corners(res, coord[a], coord[b]) {
                    rows.push(r);
                    weights.push(w);
                }
            }
            let f = tape.gather_rows(ParamId(c), &self.planes[c], d, rows, weights, 4)?;
            if !tape.value(f).is_finite() {
                return Err(Error::NonFinite {
                    array: PLANE_NAMES[c].to_string(),
                });
            }
            acc = Some(match acc {
                None => f,
                Some(prev) => tape.mul(prev, f)?,
            });
        }
        Ok(acc.expect("six planes"))
    }

    /// Records the keyframe-blended hash feature of every point
    /// (`B x (L * d_level)`).
    pub fn record_hash_feature<'a>(&'a self, tape: &mut Tape<'a>, points: &[SpaceTimePoint]) -> Result<Var> {
        let cfg = &self.config;
        let resolutions = cfg.level_resolutions();
        let intervals: Vec<(usize, f64)> = points
            .iter()
            .map(|p| keyframe_interval(&self.keyframe_times, p.t))
            .collect();
        let mut levels = Vec::with_capacity(cfg.hash_levels);
        for (l, &res) in resolutions.iter().enumerate() {
            let mut rows = Vec::with_capacity(points.len() * 16);
            let mut weights = Vec::with_capacity(points.len() * 16);
            for (p, &(key, s)) in points.iter().zip(&intervals) {
                let u = cfg.bounds.normalize(&p.x);
                let corners = hash_corners(u, res, cfg.log2_table_size);
                for (k, blend) in [(key, 1.0 - s), (key + 1, s)] {
                    for &(entry, w) in &corners {
                        rows.push(self.hash_row(k, l, entry));
                        weights.push(w * blend);
                    }
                }
            }
            let f = tape.gather_rows(Self::HASH_ID, &self.hash, cfg.level_channels, rows, weights, 16)?;
            if !tape.value(f).is_finite() {
                return Err(Error::NonFinite { array: "hash".into() });
            }
            levels.push(f);
        }
        tape.concat_cols(&levels)
    }

    fn record_head<'a>(&'a self, tape: &mut Tape<'a>, input: Var, sdf: bool) -> Result<Var> {
        let (layers, ids) = if sdf {
            (&self.sdf_head, self.head_ids(true))
        } else {
            (&self.mat_head, self.head_ids(false))
        };
        let mut h = input;
        for (i, (layer, (wid, bid))) in layers.iter().zip(ids).enumerate() {
            h = tape.linear(h, (wid, &layer.weight), (bid, &layer.bias))?;
            if i + 1 < layers.len() {
                h = tape.softplus(h, self.config.softplus_beta);
            }
        }
        Ok(h)
    }

    /// Records a batched field query on `tape`.
    ///
    /// Points outside the bounds are clamped to the boundary and counted in
    /// [`FieldVars::clamped`].
    pub fn record<'a>(&'a self, tape: &mut Tape<'a>, points: &[SpaceTimePoint], heads: Heads) -> Result<FieldVars> {
        self.check_heads(heads)?;
        let bounds = self.config.bounds;
        let mut clamped = 0;
        let pts: Vec<SpaceTimePoint> = points
            .iter()
            .map(|p| {
                let (x, moved) = bounds.clamp(&p.x);
                clamped += moved as usize;
                SpaceTimePoint::new(x, p.t.clamp(0.0, 1.0))
            })
            .collect();
        let low = self.record_plane_feature(tape, &pts)?;
        let high = self.record_hash_feature(tape, &pts)?;
        let feature = tape.concat_cols(&[low, high])?;

        let sdf = if heads.sdf {
            let center = bounds.center();
            let half = bounds.size() * 0.5;
            let r0 = self.config.init_radius();
            let mut xn = Vec::with_capacity(pts.len() * 3);
            let mut skip = Vec::with_capacity(pts.len());
            for p in &pts {
                let rel = p.x - center;
                xn.extend((0..3).map(|k| rel[k] / half[k]));
                skip.push(rel.norm() - r0);
            }
            let xn = tape.constant(Tensor::new(vec![pts.len(), 3], xn)?);
            let input = tape.concat_cols(&[feature, xn])?;
            let out = self.record_head(tape, input, true)?;
            Some(tape.add_const(out, &Tensor::new(vec![pts.len(), 1], skip)?)?)
        } else {
            None
        };
        let material = if heads.material {
            let out = self.record_head(tape, feature, false)?;
            Some(tape.sigmoid(out))
        } else {
            None
        };
        Ok(FieldVars { sdf, material, clamped })
    }

    pub fn plane_feature(&self, p: SpaceTimePoint) -> Result<Vec<f64>> {
        let mut tape = Tape::inference();
        let v = self.record_plane_feature(&mut tape, &[p])?;
        Ok(tape.take_value(v).into_data())
    }

    pub fn hash_feature(&self, p: SpaceTimePoint) -> Result<Vec<f64>> {
        let mut tape = Tape::inference();
        let v = self.record_hash_feature(&mut tape, &[p])?;
        Ok(tape.take_value(v).into_data())
    }

    /// Full query of a single point.
    pub fn query(&self, p: SpaceTimePoint) -> Result<FieldSample> {
        Ok(self.sample_batch(&[p])?[0])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "field4d",
            "config": self.config,
            "keyframe_times": self.keyframe_times,
        });
        let mut arrays = Vec::new();
        let (r, d) = (self.config.plane_resolution, self.config.plane_channels);
        for (c, plane) in self.planes.iter().enumerate() {
            arrays.push(NamedArray::f64(PLANE_NAMES[c], vec![r, r, d], plane.clone()));
        }
        let cfg = &self.config;
        arrays.push(NamedArray::f64(
            "hash",
            vec![cfg.keyframes, cfg.hash_levels, cfg.table_size(), cfg.level_channels],
            self.hash.clone(),
        ));
        for (prefix, head) in [("sdf_mlp", &self.sdf_head), ("mat_mlp", &self.mat_head)] {
            for (i, l) in head.iter().enumerate() {
                arrays.push(NamedArray::f64(
                    &format!("{prefix}.{i}.weight"),
                    vec![l.fan_out, l.fan_in],
                    l.weight.clone(),
                ));
                arrays.push(NamedArray::f64(&format!("{prefix}.{i}.bias"), vec![l.fan_out], l.bias.clone()));
            }
        }
        tensorfile::write(path, &meta, &arrays)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, arrays) = tensorfile::read(path)?;
        let fail = |reason: String| Error::format("checkpoint", path, reason);
        if meta.get("kind").and_then(|k| k.as_str()) != Some("field4d") {
            return Err(fail("metadata kind is not field4d".into()));
        }
        let config: FieldConfig = serde_json::from_value(meta["config"].clone())?;
        let keyframe_times: Vec<f64> = serde_json::from_value(meta["keyframe_times"].clone())?;
        config.validate()?;
        // The template fixes every shape; loaded arrays replace its values.
        let mut params = Self::init(config, 0)?;
        if keyframe_times.len() != params.keyframe_times.len()
            || keyframe_times.windows(2).any(|w| w[1] <= w[0])
            || keyframe_times.first() != Some(&0.0)
            || keyframe_times.last() != Some(&1.0)
        {
            return Err(fail("keyframe times must increase strictly from 0 to 1".into()));
        }
        params.keyframe_times = keyframe_times;
        if arrays.len() != params.num_leaves() {
            return Err(fail(format!("expected {} arrays, found {}", params.num_leaves(), arrays.len())));
        }
        for (i, arr) in arrays.into_iter().enumerate() {
            let id = ParamId(i);
            if arr.name != params.leaf_name(id) {
                return Err(fail(format!("array {i} is `{}`, expected `{}`", arr.name, params.leaf_name(id))));
            }
            let data = arr.to_f64();
            if data.len() != params.leaf(id).len() {
                return Err(fail(format!("array `{}` has the wrong length", arr.name)));
            }
            params.leaf_mut(id).copy_from_slice(&data);
        }
        Ok(params)
    }
}

impl ParamSet for Field4DParams {
    fn num_leaves(&self) -> usize {
        self.names.len()
    }

    fn leaf_name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    fn leaf(&self, id: ParamId) -> &[f64] {
        match id.0 {
            0..=5 => &self.planes[id.0],
            6 => &self.hash,
            _ => {
                let (layer, is_weight) = self.layer_ref(id).expect("parameter id in range");
                if is_weight {
                    &layer.weight
                } else {
                    &layer.bias
                }
            }
        }
    }

    fn leaf_mut(&mut self, id: ParamId) -> &mut [f64] {
        match id.0 {
            0..=5 => &mut self.planes[id.0],
            6 => &mut self.hash,
            i => {
                let j = i - 7;
                let n_sdf = 2 * self.sdf_head.len();
                let (head, k) = if j < n_sdf {
                    (&mut self.sdf_head, j)
                } else {
                    (&mut self.mat_head, j - n_sdf)
                };
                let layer = &mut head[k / 2];
                if k % 2 == 0 {
                    &mut layer.weight
                } else {
                    &mut layer.bias
                }
            }
        }
    }
}

impl IntrinsicField for Field4DParams {
    fn bounds(&self) -> Aabb {
        self.config.bounds
    }

    fn sdf_batch(&self, points: &[SpaceTimePoint]) -> Result<Vec<f64>> {
        let mut tape = Tape::inference();
        let vars = self.record(&mut tape, points, Heads::SDF)?;
        Ok(tape.take_value(vars.sdf.expect("sdf head")).into_data())
    }

    fn sample_batch(&self, points: &[SpaceTimePoint]) -> Result<Vec<FieldSample>> {
        let mut tape = Tape::inference();
        let vars = self.record(&mut tape, points, Heads::BOTH)?;
        let sdf = tape.value(vars.sdf.expect("sdf head")).data();
        let mat = tape.value(vars.material.expect("material head")).data();
        Ok(sdf
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                let m = &mat[i * MATERIAL_CHANNELS..(i + 1) * MATERIAL_CHANNELS];
                FieldSample {
                    sdf: s,
                    k_d: [m[0], m[1], m[2]],
                    k_orm: [m[3], m[4], m[5]],
                }
            })
            .collect())
    }
}

#[cfg(test)]
mod tests;
