//! ASCII OBJ with optional `v x y z r g b` vertex colors.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::math::Vec3;
use crate::mesh::TriMesh;

pub fn to_string(mesh: &TriMesh) -> String {
    let mut s = String::new();
    for (i, v) in mesh.vertices.iter().enumerate() {
        match &mesh.colors {
            Some(c) => {
                let c = c[i];
                writeln!(s, "v {} {} {} {} {} {}", v.x, v.y, v.z, c[0], c[1], c[2]).unwrap();
            }
            None => writeln!(s, "v {} {} {}", v.x, v.y, v.z).unwrap(),
        }
    }
    for f in &mesh.faces {
        writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1).unwrap();
    }
    s
}

/// Parses vertices and faces; polygons are fan-triangulated and texture or
/// normal indices in `f` records are ignored.
pub fn parse(text: &str, path: &Path) -> Result<TriMesh> {
    let fail = |line: usize, reason: &str| Error::format("OBJ", path, format!("line {line}: {reason}"));
    let mut vertices = Vec::new();
    let mut colors = Vec::new();
    let mut faces = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let ln = ln + 1;
        let mut it = line.split_whitespace();
        match it.next() {
            Some("v") => {
                let vals: Vec<f64> = it
                    .map(|t| t.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| fail(ln, "bad vertex coordinate"))?;
                if vals.len() != 3 && vals.len() != 6 {
                    return Err(fail(ln, "vertex needs 3 or 6 values"));
                }
                vertices.push(Vec3::new(vals[0], vals[1], vals[2]));
                colors.push((vals.len() == 6).then(|| [vals[3], vals[4], vals[5]]));
            }
            Some("f") => {
                let idx: Vec<usize> = it
                    .map(|t| {
                        let first = t.split('/').next().unwrap_or("");
                        let i: i64 = first.parse().map_err(|_| fail(ln, "bad face index"))?;
                        let n = vertices.len() as i64;
                        let abs = if i < 0 { n + i } else { i - 1 };
                        if abs < 0 || abs >= n {
                            return Err(fail(ln, "face index out of range"));
                        }
                        Ok(abs as usize)
                    })
                    .collect::<Result<_>>()?;
                if idx.len() < 3 {
                    return Err(fail(ln, "face needs at least 3 vertices"));
                }
                for k in 1..idx.len() - 1 {
                    faces.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            _ => {}
        }
    }
    let colors = if !colors.is_empty() && colors.iter().all(|c| c.is_some()) {
        Some(colors.into_iter().map(|c| c.unwrap()).collect())
    } else {
        None
    };
    Ok(TriMesh {
        vertices,
        faces,
        colors,
    })
}

pub fn write(path: &Path, mesh: &TriMesh) -> Result<()> {
    fs::write(path, to_string(mesh))?;
    Ok(())
}

pub fn read(path: &Path) -> Result<TriMesh> {
    parse(&fs::read_to_string(path)?, path)
}
