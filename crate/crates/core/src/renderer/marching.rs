//! Isosurface extraction by marching tetrahedra.
//!
//! Every grid cell is split into six tetrahedra around its main diagonal,
//! which makes the face splits agree between neighbouring cells. Vertices
//! are keyed by grid edge, so the output is welded and closed wherever the
//! surface does not leave the grid.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::field4d::{IntrinsicField, SpaceTimePoint};
use crate::math::Vec3;
use crate::mesh::TriMesh;

const TETS: [[usize; 4]; 6] = [[0, 1, 3, 7], [0, 3, 2, 7], [0, 2, 6, 7], [0, 6, 4, 7], [0, 4, 5, 7], [0, 5, 1, 7]];

/// Extracts the `sdf = 0` surface at time `t` on a `resolution^3` cell grid
/// spanning the field bounds. Faces are wound so their normals point toward
/// positive distance.
pub fn marching_cubes<F: IntrinsicField + ?Sized>(field: &F, t: f64, resolution: usize) -> Result<TriMesh> {
    if resolution < 8 {
        return Err(Error::InvalidConfig(format!("marching resolution must be at least 8, got {resolution}")));
    }
    let b = field.bounds();
    let n = resolution + 1;
    let size = b.size();
    let node = |i: usize, j: usize, k: usize| {
        Vec3::new(
            b.min[0] + size.x * i as f64 / resolution as f64,
            b.min[1] + size.y * j as f64 / resolution as f64,
            b.min[2] + size.z * k as f64 / resolution as f64,
        )
    };
    let index = |i: usize, j: usize, k: usize| (k * n + j) * n + i;
    let mut values = Vec::with_capacity(n * n * n);
    let mut batch = Vec::with_capacity(1 << 14);
    for k in 0..n {
        for j in 0..n {
            for i in 0..n {
                batch.push(SpaceTimePoint::new(node(i, j, k), t));
                if batch.len() == batch.capacity() {
                    values.extend(field.sdf_batch(&batch)?);
                    batch.clear();
                }
            }
        }
    }
    values.extend(field.sdf_batch(&batch)?);
    let position = |id: usize| node(id % n, (id / n) % n, id / (n * n));

    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    let mut edge_vertex: HashMap<(usize, usize), usize> = HashMap::new();
    let mut crossing = |a: usize, b: usize, vertices: &mut Vec<Vec3>| -> usize {
        let key = (a.min(b), a.max(b));
        *edge_vertex.entry(key).or_insert_with(|| {
            let (va, vb) = (values[key.0], values[key.1]);
            let s = va / (va - vb);
            vertices.push(position(key.0) + s * (position(key.1) - position(key.0)));
            vertices.len() - 1
        })
    };
    for k in 0..resolution {
        for j in 0..resolution {
            for i in 0..resolution {
                let corners: [usize; 8] =
                    std::array::from_fn(|c| index(i + (c & 1), j + ((c >> 1) & 1), k + ((c >> 2) & 1)));
                for tet in TETS {
                    let ids = tet.map(|c| corners[c]);
                    let (inside, outside): (Vec<usize>, Vec<usize>) = ids.iter().partition(|&&id| values[id] < 0.0);
                    let tris: Vec<[usize; 3]> = match inside.len() {
                        1 => vec![[
                            crossing(inside[0], outside[0], &mut vertices),
                            crossing(inside[0], outside[1], &mut vertices),
                            crossing(inside[0], outside[2], &mut vertices),
                        ]],
                        3 => vec![[
                            crossing(outside[0], inside[0], &mut vertices),
                            crossing(outside[0], inside[1], &mut vertices),
                            crossing(outside[0], inside[2], &mut vertices),
                        ]],
                        2 => {
                            let (p, q, r, s) = (inside[0], inside[1], outside[0], outside[1]);
                            let a = crossing(p, r, &mut vertices);
                            let b = crossing(p, s, &mut vertices);
                            let c = crossing(q, s, &mut vertices);
                            let d = crossing(q, r, &mut vertices);
                            vec![[a, b, c], [a, c, d]]
                        }
                        _ => continue,
                    };
                    let centroid = |set: &[usize]| set.iter().map(|&id| position(id)).sum::<Vec3>() / set.len() as f64;
                    let out_dir = centroid(&outside) - centroid(&inside);
                    for mut tri in tris {
                        let nrm = (vertices[tri[1]] - vertices[tri[0]]).cross(&(vertices[tri[2]] - vertices[tri[0]]));
                        if nrm.dot(&out_dir) < 0.0 {
                            tri.swap(1, 2);
                        }
                        faces.push(tri);
                    }
                }
            }
        }
    }
    Ok(TriMesh::new(vertices, faces))
}
