//! Z-buffered triangle rasterization of template meshes.

use serde::{Deserialize, Serialize};

use super::DeformableMeshSequence;
use crate::error::{Error, Result};
use crate::gradtape::dual::{Dual, Scalar};
use crate::io::{FlowMap, Image};
use crate::math::Vec3;
use crate::renderer::CameraPose;

/// Per-pixel visible face and perspective-correct barycentrics.
#[derive(Clone, Debug, PartialEq)]
pub struct Coverage {
    pub width: usize,
    pub height: usize,
    pub face: Vec<Option<usize>>,
    pub bary: Vec<[f64; 3]>,
    pub depth: Vec<f64>,
}

impl Coverage {
    /// Surface point under pixel `i` for the given vertex positions.
    pub fn point(&self, i: usize, faces: &[[usize; 3]], positions: &[Vec3]) -> Option<Vec3> {
        let f = faces[self.face[i]?];
        let b = self.bary[i];
        Some(positions[f[0]] * b[0] + positions[f[1]] * b[1] + positions[f[2]] * b[2])
    }
}

/// Rasterizes `faces` over `positions`, sampling at pixel centers. Triangles
/// with a vertex behind the camera are skipped; both windings are drawn.
pub fn rasterize(camera: &CameraPose, positions: &[Vec3], faces: &[[usize; 3]]) -> Result<Coverage> {
    camera.validate()?;
    let (w, h) = (camera.width, camera.height);
    let mut cov = Coverage {
        width: w,
        height: h,
        face: vec![None; w * h],
        bary: vec![[0.0; 3]; w * h],
        depth: vec![f64::INFINITY; w * h],
    };
    let proj: Vec<Option<(f64, f64, f64)>> = positions.iter().map(|p| camera.project(p)).collect();
    for (fi, face) in faces.iter().enumerate() {
        if face.iter().any(|&i| i >= positions.len()) {
            return Err(Error::InvalidMesh(format!("face {fi} indexes past {} vertices", positions.len())));
        }
        let (Some(a), Some(b), Some(c)) = (proj[face[0]], proj[face[1]], proj[face[2]]) else {
            continue;
        };
        let area = (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0);
        if area.abs() < 1e-14 {
            continue;
        }
        let x0 = a.0.min(b.0).min(c.0).floor().max(0.0) as usize;
        let x1 = (a.0.max(b.0).max(c.0).ceil().max(0.0) as usize).min(w);
        let y0 = a.1.min(b.1).min(c.1).floor().max(0.0) as usize;
        let y1 = (a.1.max(b.1).max(c.1).ceil().max(0.0) as usize).min(h);
        for y in y0..y1 {
            for x in x0..x1 {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let edge = |p: (f64, f64, f64), q: (f64, f64, f64)| (q.0 - p.0) * (py - p.1) - (q.1 - p.1) * (px - p.0);
                let l = [edge(b, c) / area, edge(c, a) / area, edge(a, b) / area];
                if l.iter().any(|&v| v < 0.0) {
                    continue;
                }
                let inv = [l[0] / a.2, l[1] / b.2, l[2] / c.2];
                let s = inv[0] + inv[1] + inv[2];
                let depth = 1.0 / s;
                let i = y * w + x;
                if depth < cov.depth[i] {
                    cov.depth[i] = depth;
                    cov.face[i] = Some(fi);
                    cov.bary[i] = [inv[0] / s, inv[1] / s, inv[2] / s];
                }
            }
        }
    }
    Ok(cov)
}

/// Screen-space flow from frame `a` to frame `b`: for every pixel covered in
/// frame `a`, the displacement between the projections of the same surface
/// point (fixed barycentrics on the same face) in both frames.
pub fn rasterize_flow(seq: &DeformableMeshSequence, a: usize, b: usize, camera: &CameraPose) -> Result<FlowMap> {
    let pa = seq.frame_positions(a)?;
    let pb = seq.frame_positions(b)?;
    flow_between(camera, &pa, &pb, &seq.canonical.faces)
}

pub(crate) fn flow_between(camera: &CameraPose, pa: &[Vec3], pb: &[Vec3], faces: &[[usize; 3]]) -> Result<FlowMap> {
    let cov = rasterize(camera, pa, faces)?;
    let mut out = FlowMap::empty(camera.width, camera.height);
    for i in 0..cov.face.len() {
        let (Some(xa), Some(xb)) = (cov.point(i, faces, pa), cov.point(i, faces, pb)) else {
            continue;
        };
        if let (Some(ua), Some(ub)) = (camera.project(&xa), camera.project(&xb)) {
            out.flow[i] = [ub.0 - ua.0, ub.1 - ua.1];
            out.mask[i] = true;
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TemplateShading {
    pub background: [f64; 3],
    /// Fraction of the vertex color kept on faces seen edge-on.
    pub ambient: f64,
}

impl Default for TemplateShading {
    fn default() -> Self {
        TemplateShading {
            background: [0.0; 3],
            ambient: 0.3,
        }
    }
}

/// Rasterizes the sequence at time `t` with interpolated vertex colors and a
/// flat headlight factor `ambient + (1 - ambient) |n_f . forward|` per face.
pub fn render_template(
    seq: &DeformableMeshSequence,
    camera: &CameraPose,
    t: f64,
    shading: &TemplateShading,
) -> Result<Image> {
    let pos = seq.positions_at(t)?;
    let faces = &seq.canonical.faces;
    let colors = seq.colors();
    let cov = rasterize(camera, &pos, faces)?;
    let fwd = camera.forward();
    let mut img = Image::filled(camera.width, camera.height, &shading.background);
    for i in 0..cov.face.len() {
        let Some(fi) = cov.face[i] else { continue };
        let f = faces[fi];
        let n = (pos[f[1]] - pos[f[0]]).cross(&(pos[f[2]] - pos[f[0]]));
        let light = shading.ambient + (1.0 - shading.ambient) * (n.dot(&fwd).abs() / n.norm());
        let b = cov.bary[i];
        for c in 0..3 {
            img.data[3 * i + c] = light * (b[0] * colors[f[0]][c] + b[1] * colors[f[1]][c] + b[2] * colors[f[2]][c]);
        }
    }
    Ok(img)
}

/// Soft silhouette IoU loss `1 - IoU(o, g)` with occupancy
/// `o(p) = 1 - prod_f (1 - sigmoid(d_f(p) / softness))`, where `d_f` is the
/// signed pixel distance to triangle `f` (positive inside). Returns the loss
/// and its gradient with respect to the vertex positions.
pub(crate) fn soft_iou(
    camera: &CameraPose,
    positions: &[Vec3],
    faces: &[[usize; 3]],
    target: &[bool],
    softness: f64,
) -> Result<(f64, Vec<Vec3>)> {
    let (w, h) = (camera.width, camera.height);
    if target.len() != w * h {
        return Err(Error::ShapeMismatch {
            expected: vec![h, w],
            actual: vec![target.len()],
        });
    }
    let proj: Vec<_> = positions.iter().map(|p| camera.project_jacobian(p)).collect();
    // Per pixel: (face, s_f, ds_f / d(screen coords of the 3 vertices)).
    let mut hits: Vec<Vec<(usize, f64, [f64; 6])>> = vec![Vec::new(); w * h];
    let reach = 8.0 * softness;
    for (fi, face) in faces.iter().enumerate() {
        let (Some(a), Some(b), Some(c)) = (&proj[face[0]], &proj[face[1]], &proj[face[2]]) else {
            continue;
        };
        let sc = [a.0 .0, a.0 .1, b.0 .0, b.0 .1, c.0 .0, c.0 .1];
        let x0 = (sc[0].min(sc[2]).min(sc[4]) - reach).floor().max(0.0) as usize;
        let x1 = ((sc[0].max(sc[2]).max(sc[4]) + reach).ceil().max(0.0) as usize).min(w);
        let y0 = (sc[1].min(sc[3]).min(sc[5]) - reach).floor().max(0.0) as usize;
        let y1 = ((sc[1].max(sc[3]).max(sc[5]) + reach).ceil().max(0.0) as usize).min(h);
        let v: [Dual<6>; 6] = std::array::from_fn(|k| Dual::variable(sc[k], k));
        let area = (v[2] - v[0]) * (v[5] - v[1]) - (v[3] - v[1]) * (v[4] - v[0]);
        if area.v.abs() < 1e-12 {
            continue;
        }
        let orient = area.v.signum();
        for y in y0..y1 {
            for x in x0..x1 {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let mut d: Option<Dual<6>> = None;
                for (p, q) in [(0, 1), (1, 2), (2, 0)] {
                    let (ex, ey) = (v[2 * q] - v[2 * p], v[2 * q + 1] - v[2 * p + 1]);
                    let len = (ex * ex + ey * ey).sqrt();
                    let dist = (ex * (-v[2 * p + 1] + py) - ey * (-v[2 * p] + px)) * orient / len;
                    if d.map_or(true, |m| dist.v < m.v) {
                        d = Some(dist);
                    }
                }
                let s = (d.unwrap() * (1.0 / softness)).sigmoid();
                if s.v > 1e-9 {
                    hits[y * w + x].push((fi, s.v, s.d));
                }
            }
        }
    }
    let mut occ = vec![0.0; w * h];
    for (i, list) in hits.iter().enumerate() {
        occ[i] = 1.0 - list.iter().map(|e| 1.0 - e.1).product::<f64>();
    }
    let g: Vec<f64> = target.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    let inter: f64 = occ.iter().zip(&g).map(|(o, g)| o * g).sum();
    let union: f64 = occ.iter().zip(&g).map(|(o, g)| o + g - o * g).sum();
    if union <= 0.0 {
        return Ok((0.0, vec![Vec3::zeros(); positions.len()]));
    }
    let loss = 1.0 - inter / union;
    let mut grad = vec![Vec3::zeros(); positions.len()];
    for (i, list) in hits.iter().enumerate() {
        if list.is_empty() {
            continue;
        }
        let d_occ = -(g[i] * union - inter * (1.0 - g[i])) / (union * union);
        // Product of (1 - s) over all other faces, via prefix and suffix products.
        let mut prefix = vec![1.0; list.len() + 1];
        for (k, e) in list.iter().enumerate() {
            prefix[k + 1] = prefix[k] * (1.0 - e.1);
        }
        let mut suffix = 1.0;
        for k in (0..list.len()).rev() {
            let (fi, _, ds) = list[k];
            let scale = d_occ * prefix[k] * suffix;
            suffix *= 1.0 - list[k].1;
            for (corner, &vi) in faces[fi].iter().enumerate() {
                let (_, [du, dv]) = proj[vi].as_ref().expect("projected vertex");
                grad[vi] += scale * (du * ds[2 * corner] + dv * ds[2 * corner + 1]);
            }
        }
    }
    Ok((loss, grad))
}
