//! Deformable template meshes and the conditioning maps derived from them.
//!
//! A coarse mesh is deformed per frame to follow reference flow, rendered
//! from a query view, encoded into patch features, compressed with PCA and
//! pooled into a low-resolution state map.

pub mod arap;
pub mod assets;
pub mod denoise;
pub mod encoder;
pub mod fit;
pub mod pca;
pub mod raster;
pub mod statemap;

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::tensorfile::{self, ArrayData, NamedArray};
use crate::math::Vec3;
use crate::mesh::TriMesh;

pub use arap::{arap_energy, Arap};
pub use denoise::{c_out, c_skip, consistency_denoise, Denoiser, ZeroDenoiser};
pub use encoder::{encode_features, FeatureEncoder, ToyEncoder};
pub use fit::{fit_deformation, FitConfig, FitReport, FlowTarget};
pub use pca::{fit_pca, PcaBasis};
pub use raster::{rasterize, rasterize_flow, render_template, Coverage, TemplateShading};
pub use statemap::{neural_state_map, NeuralStateMap, NeuralTemplate, StateMapSource, TemplateConfig};

/// Canonical mesh with per-frame vertex offsets. Frame `k` of `n` sits at
/// time `k / (n - 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformableMeshSequence {
    pub canonical: TriMesh,
    /// `frames x vertices` displacements.
    pub offsets: Vec<Vec<Vec3>>,
    pub canonical_frame: usize,
}

impl DeformableMeshSequence {
    /// Sequence with `frames` frames and all offsets zero.
    pub fn rest(canonical: TriMesh, frames: usize) -> Result<Self> {
        let n = canonical.vertices.len();
        let seq = DeformableMeshSequence {
            canonical,
            offsets: vec![vec![Vec3::zeros(); n]; frames],
            canonical_frame: 0,
        };
        seq.validate()?;
        Ok(seq)
    }

    pub fn frames(&self) -> usize {
        self.offsets.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.canonical.validate()?;
        if self.canonical.colors.is_none() {
            return Err(Error::InvalidMesh("template mesh needs per-vertex colors".into()));
        }
        if self.offsets.is_empty() {
            return Err(Error::InvalidMesh("sequence has no frames".into()));
        }
        if self.canonical_frame >= self.frames() {
            return Err(Error::InvalidMesh(format!(
                "canonical frame {} outside {} frames",
                self.canonical_frame,
                self.frames()
            )));
        }
        let n = self.canonical.vertices.len();
        for (k, frame) in self.offsets.iter().enumerate() {
            if frame.len() != n {
                return Err(Error::InvalidMesh(format!("frame {k} has {} offsets for {n} vertices", frame.len())));
            }
            if frame.iter().any(|o| !o.iter().all(|v| v.is_finite())) {
                return Err(Error::NonFinite {
                    array: format!("offsets[{k}]"),
                });
            }
        }
        if self.offsets[self.canonical_frame].iter().any(|o| *o != Vec3::zeros()) {
            return Err(Error::InvalidMesh("canonical frame offsets must be zero".into()));
        }
        Ok(())
    }

    pub fn frame_time(&self, k: usize) -> f64 {
        if self.frames() < 2 {
            0.0
        } else {
            k as f64 / (self.frames() - 1) as f64
        }
    }

    pub fn frame_positions(&self, k: usize) -> Result<Vec<Vec3>> {
        let off = self
            .offsets
            .get(k)
            .ok_or_else(|| Error::InvalidConfig(format!("frame {k} outside {} frames", self.frames())))?;
        Ok(self.canonical.vertices.iter().zip(off).map(|(v, o)| v + o).collect())
    }

    /// Vertex positions at time `t in [0, 1]`, interpolating linearly
    /// between neighbouring frames.
    pub fn positions_at(&self, t: f64) -> Result<Vec<Vec3>> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::InvalidConfig(format!("time {t} outside [0, 1]")));
        }
        if self.frames() == 1 {
            return self.frame_positions(0);
        }
        let f = t * (self.frames() - 1) as f64;
        let k = (f.floor() as usize).min(self.frames() - 2);
        let s = f - k as f64;
        let (a, b) = (&self.offsets[k], &self.offsets[k + 1]);
        Ok(self
            .canonical
            .vertices
            .iter()
            .zip(a.iter().zip(b))
            .map(|(v, (oa, ob))| v + oa * (1.0 - s) + ob * s)
            .collect())
    }

    pub fn colors(&self) -> &[[f64; 3]] {
        self.canonical.colors.as_deref().unwrap_or(&[])
    }

    pub fn to_arrays(&self) -> Vec<NamedArray> {
        let m = &self.canonical;
        let flat = |v: &[Vec3]| v.iter().flat_map(|p| [p.x, p.y, p.z]).collect::<Vec<_>>();
        vec![
            NamedArray {
                name: "vertices".into(),
                shape: vec![m.vertices.len(), 3],
                data: ArrayData::F64(flat(&m.vertices)),
            },
            NamedArray {
                name: "faces".into(),
                shape: vec![m.faces.len(), 3],
                data: ArrayData::F64(m.faces.iter().flat_map(|f| f.map(|i| i as f64)).collect()),
            },
            NamedArray {
                name: "colors".into(),
                shape: vec![m.vertices.len(), 3],
                data: ArrayData::F64(self.colors().iter().flatten().copied().collect()),
            },
            NamedArray {
                name: "offsets".into(),
                shape: vec![self.frames(), m.vertices.len(), 3],
                data: ArrayData::F64(self.offsets.iter().flat_map(|f| flat(f)).collect()),
            },
        ]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({ "kind": "deformable_mesh_sequence", "canonical_frame": self.canonical_frame });
        tensorfile::write(path, &meta, &self.to_arrays())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, arrays) = tensorfile::read(path)?;
        let bad = |reason: String| Error::format("mesh sequence", path, reason);
        let get = |name: &str| {
            arrays
                .iter()
                .find(|a| a.name == name)
                .ok_or_else(|| bad(format!("missing array {name}")))
        };
        let (v, f, c, o) = (get("vertices")?, get("faces")?, get("colors")?, get("offsets")?);
        let n = v.shape.first().copied().unwrap_or(0);
        if v.shape != [n, 3] || c.shape != [n, 3] || f.shape.len() != 2 || f.shape[1] != 3 || o.shape.len() != 3 {
            return Err(bad("inconsistent array shapes".into()));
        }
        if o.shape[1] != n || o.shape[2] != 3 {
            return Err(bad(format!("offsets shape {:?} does not match {n} vertices", o.shape)));
        }
        let vec3s = |d: &[f64]| d.chunks_exact(3).map(|p| Vec3::new(p[0], p[1], p[2])).collect::<Vec<_>>();
        let faces = f
            .to_f64()
            .chunks_exact(3)
            .map(|t| {
                if t.iter().any(|x| x.fract() != 0.0 || *x < 0.0) {
                    Err(bad("face indices must be non-negative integers".into()))
                } else {
                    Ok([t[0] as usize, t[1] as usize, t[2] as usize])
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let mut mesh = TriMesh::new(vec3s(&v.to_f64()), faces);
        mesh.colors = Some(c.to_f64().chunks_exact(3).map(|p| [p[0], p[1], p[2]]).collect());
        let offs = o.to_f64();
        let offsets = if n == 0 {
            vec![Vec::new(); o.shape[0]]
        } else {
            offs.chunks_exact(3 * n).map(vec3s).collect()
        };
        let seq = DeformableMeshSequence {
            canonical: mesh,
            offsets,
            canonical_frame: meta.get("canonical_frame").and_then(|v| v.as_u64()).unwrap_or(0) as usize,
        };
        seq.validate().map_err(|e| bad(e.to_string()))?;
        Ok(seq)
    }
}
