//! Indexed triangle meshes.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::math::Vec3;

#[derive(Clone, Debug, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
    /// Optional per-vertex colors in `[0, 1]`.
    pub colors: Option<Vec<[f64; 3]>>,
}

impl TriMesh {
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[usize; 3]>) -> Self {
        TriMesh {
            vertices,
            faces,
            colors: None,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    /// Checks indices, colors and face areas.
    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len();
        if let Some(c) = &self.colors {
            if c.len() != n {
                return Err(Error::InvalidMesh(format!("{} colors for {n} vertices", c.len())));
            }
        }
        for (fi, f) in self.faces.iter().enumerate() {
            if f.iter().any(|&i| i >= n) {
                return Err(Error::InvalidMesh(format!("face {fi} indexes past {n} vertices")));
            }
            let area = self.face_area(fi);
            if !(area > 1e-10) {
                return Err(Error::InvalidMesh(format!("face {fi} is degenerate (area {area:e})")));
            }
        }
        if self.vertices.iter().any(|v| !v.iter().all(|c| c.is_finite())) {
            return Err(Error::InvalidMesh("non-finite vertex position".into()));
        }
        Ok(())
    }

    pub fn face_area(&self, f: usize) -> f64 {
        let [a, b, c] = self.faces[f];
        0.5 * (self.vertices[b] - self.vertices[a]).cross(&(self.vertices[c] - self.vertices[a])).norm()
    }

    /// Undirected edges as sorted vertex pairs.
    pub fn edges(&self) -> BTreeSet<(usize, usize)> {
        let mut e = BTreeSet::new();
        for f in &self.faces {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                e.insert((a.min(b), a.max(b)));
            }
        }
        e
    }

    /// Sorted one-ring neighbours of every vertex.
    pub fn one_rings(&self) -> Vec<Vec<usize>> {
        let mut rings = vec![BTreeSet::new(); self.vertices.len()];
        for (a, b) in self.edges() {
            rings[a].insert(b);
            rings[b].insert(a);
        }
        rings.into_iter().map(|s| s.into_iter().collect()).collect()
    }

    /// `V - E + F`, counting only vertices used by some face.
    pub fn euler_characteristic(&self) -> i64 {
        let used: BTreeSet<usize> = self.faces.iter().flatten().copied().collect();
        used.len() as i64 - self.edges().len() as i64 + self.faces.len() as i64
    }

    /// Area-weighted vertex normals.
    pub fn vertex_normals(&self) -> Vec<Vec3> {
        let mut n = vec![Vec3::zeros(); self.vertices.len()];
        for f in &self.faces {
            let [a, b, c] = *f;
            let fn_ = (self.vertices[b] - self.vertices[a]).cross(&(self.vertices[c] - self.vertices[a]));
            for &i in f {
                n[i] += fn_;
            }
        }
        n.into_iter()
            .map(|v| {
                let l = v.norm();
                if l > 0.0 {
                    v / l
                } else {
                    v
                }
            })
            .collect()
    }
}
