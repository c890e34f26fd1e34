//! Procedural template meshes and motions for tests and demos.

use std::f64::consts::PI;

use nalgebra::{Rotation3, Unit};

use super::DeformableMeshSequence;
use crate::error::Result;
use crate::math::Vec3;
use crate::mesh::TriMesh;

/// Latitude-longitude sphere with `rings >= 2` latitude bands and
/// `segments >= 3` longitudes; `color` receives the unit direction.
pub fn uv_sphere(radius: f64, rings: usize, segments: usize, color: impl Fn(&Vec3) -> [f64; 3]) -> TriMesh {
    let (rings, segments) = (rings.max(2), segments.max(3));
    let mut dirs = vec![Vec3::y()];
    for r in 1..rings {
        let theta = PI * r as f64 / rings as f64;
        for s in 0..segments {
            let phi = 2.0 * PI * s as f64 / segments as f64;
            dirs.push(Vec3::new(theta.sin() * phi.sin(), theta.cos(), theta.sin() * phi.cos()));
        }
    }
    dirs.push(-Vec3::y());
    let south = dirs.len() - 1;
    let ring = |r: usize, s: usize| 1 + (r - 1) * segments + s % segments;
    let mut faces = Vec::new();
    for s in 0..segments {
        faces.push([0, ring(1, s), ring(1, s + 1)]);
        faces.push([south, ring(rings - 1, s + 1), ring(rings - 1, s)]);
    }
    for r in 1..rings - 1 {
        for s in 0..segments {
            let (a, b, c, d) = (ring(r, s), ring(r, s + 1), ring(r + 1, s), ring(r + 1, s + 1));
            faces.push([a, c, d]);
            faces.push([a, d, b]);
        }
    }
    let mut mesh = TriMesh::new(dirs.iter().map(|d| d * radius).collect(), faces);
    mesh.colors = Some(dirs.iter().map(&color).collect());
    mesh
}

/// Sphere painted with a longitude/latitude checker so that rotation about
/// the vertical axis is visible.
pub fn textured_sphere(radius: f64, rings: usize, segments: usize) -> TriMesh {
    uv_sphere(radius, rings, segments, |d| {
        let lon = d.x.atan2(d.z) + PI;
        let sector = (lon / (PI / 4.0)).floor() as i64;
        let band = ((d.y.clamp(-1.0, 1.0).acos()) / (PI / 4.0)).floor() as i64;
        let hue = 0.5 + 0.5 * (lon).cos();
        if (sector + band) % 2 == 0 {
            [0.9, 0.3 + 0.5 * hue, 0.2]
        } else {
            [0.1, 0.2 + 0.4 * hue, 0.8]
        }
    })
}

/// Sphere whose radius swells into `petals` lobes around the vertical axis,
/// colored from a green core to pink tips.
pub fn flower_proxy(radius: f64, petals: usize, rings: usize, segments: usize) -> TriMesh {
    let lobe = move |d: &Vec3| {
        let phi = d.x.atan2(d.z);
        let equator = (1.0 - d.y * d.y).max(0.0);
        1.0 + 0.35 * equator * (petals as f64 * phi).cos().max(0.0)
    };
    let mut mesh = uv_sphere(radius, rings, segments, move |d| {
        let s = (lobe(d) - 1.0) / 0.35;
        [0.3 + 0.6 * s, 0.6 - 0.3 * s, 0.3 + 0.4 * s]
    });
    for v in &mut mesh.vertices {
        let d = v.normalize();
        *v = d * radius * lobe(&d);
    }
    mesh
}

/// Axis-aligned cube of side 1 centred at the origin, outward winding.
/// Vertex `i` sits at `(x, y, z) - 0.5` with `x = i & 1`, `y = (i >> 1) & 1`,
/// `z = (i >> 2) & 1`.
pub fn unit_cube(colors: [[f64; 3]; 8]) -> TriMesh {
    let vertices = (0..8)
        .map(|i| Vec3::new((i & 1) as f64 - 0.5, ((i >> 1) & 1) as f64 - 0.5, ((i >> 2) & 1) as f64 - 0.5))
        .collect();
    let faces = vec![
        [0, 2, 3],
        [0, 3, 1], // -z
        [4, 5, 7],
        [4, 7, 6], // +z
        [0, 4, 6],
        [0, 6, 2], // -x
        [1, 3, 7],
        [1, 7, 5], // +x
        [0, 1, 5],
        [0, 5, 4], // -y
        [2, 6, 7],
        [2, 7, 3], // +y
    ];
    let mut mesh = TriMesh::new(vertices, faces);
    mesh.colors = Some(colors.to_vec());
    mesh
}

/// Flat `n x n` grid of quads of side `size` in the plane `z = depth`,
/// centred on the z axis, colored by position.
pub fn quad_grid(size: f64, n: usize, depth: f64) -> TriMesh {
    let n = n.max(1);
    let idx = |i: usize, j: usize| i * (n + 1) + j;
    let mut vertices = Vec::new();
    let mut colors = Vec::new();
    for i in 0..=n {
        for j in 0..=n {
            let (u, v) = (j as f64 / n as f64, i as f64 / n as f64);
            vertices.push(Vec3::new((u - 0.5) * size, (v - 0.5) * size, depth));
            colors.push([u, v, 0.5]);
        }
    }
    let mut faces = Vec::new();
    for i in 0..n {
        for j in 0..n {
            faces.push([idx(i, j), idx(i, j + 1), idx(i + 1, j + 1)]);
            faces.push([idx(i, j), idx(i + 1, j + 1), idx(i + 1, j)]);
        }
    }
    let mut mesh = TriMesh::new(vertices, faces);
    mesh.colors = Some(colors);
    mesh
}

/// Rigid rotation about `axis` through the origin, from 0 at the first frame
/// to `angle` at the last.
pub fn rotating_sequence(mesh: TriMesh, frames: usize, axis: Vec3, angle: f64) -> Result<DeformableMeshSequence> {
    let mut seq = DeformableMeshSequence::rest(mesh, frames)?;
    let axis = Unit::new_normalize(axis);
    for k in 0..frames {
        let rot = Rotation3::from_axis_angle(&axis, angle * seq.frame_time(k));
        seq.offsets[k] = seq.canonical.vertices.iter().map(|v| rot * v - v).collect();
    }
    seq.offsets[0] = vec![Vec3::zeros(); seq.canonical.vertices.len()];
    Ok(seq)
}

/// Rigid translation from 0 at the first frame to `total` at the last.
pub fn translating_sequence(mesh: TriMesh, frames: usize, total: Vec3) -> Result<DeformableMeshSequence> {
    let mut seq = DeformableMeshSequence::rest(mesh, frames)?;
    for k in 1..frames {
        let d = total * seq.frame_time(k);
        seq.offsets[k] = vec![d; seq.canonical.vertices.len()];
    }
    Ok(seq)
}

/// Radial opening: vertices start at `start_scale` of their canonical
/// distance from the origin at the first frame and reach it at the last.
/// The canonical frame is the last one.
pub fn blooming_sequence(mesh: TriMesh, frames: usize, start_scale: f64) -> Result<DeformableMeshSequence> {
    let mut seq = DeformableMeshSequence::rest(mesh, frames)?;
    seq.canonical_frame = frames - 1;
    for k in 0..frames - 1 {
        let s = start_scale + (1.0 - start_scale) * seq.frame_time(k);
        seq.offsets[k] = seq.canonical.vertices.iter().map(|v| v * (s - 1.0)).collect();
    }
    Ok(seq)
}
