//! Sphere tracing, normals and shadow rays over any [`IntrinsicField`].
//!
//! All routines march many rays in lockstep so that every step issues one
//! batched field query.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::field4d::{IntrinsicField, SpaceTimePoint};
use crate::math::Vec3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TraceOptions {
    pub max_steps: usize,
    /// Hit threshold as a fraction of the scene extent.
    pub hit_epsilon: f64,
    /// Normal stencil half-width as a fraction of the scene extent.
    pub normal_step: f64,
    /// Upper bound on travel distance, in scene units.
    pub max_distance: f64,
}

impl Default for TraceOptions {
    fn default() -> Self {
        TraceOptions {
            max_steps: 128,
            hit_epsilon: 1e-3,
            normal_step: 1e-3,
            max_distance: f64::INFINITY,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurfaceHit {
    pub position: Vec3,
    /// Unit normal facing the incoming ray; zero on a miss.
    pub normal: Vec3,
    pub distance: f64,
    pub hit: bool,
}

/// Raw outcome of one marched ray.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct March {
    pub hit: bool,
    pub distance: f64,
    /// Smallest signed distance seen along the march and where it was seen.
    pub min_sdf: f64,
    pub min_distance: f64,
    pub steps: usize,
}

impl March {
    fn miss() -> Self {
        March {
            hit: false,
            distance: f64::INFINITY,
            min_sdf: f64::INFINITY,
            min_distance: f64::INFINITY,
            steps: 0,
        }
    }
}

/// Marches every ray from its entry into the field bounds until
/// `sdf < epsilon`, the ray leaves the bounds, or the step budget runs out.
pub fn march<F: IntrinsicField + ?Sized>(field: &F, rays: &[Ray], t: f64, opts: &TraceOptions) -> Result<Vec<March>> {
    let bounds = field.bounds();
    let eps = opts.hit_epsilon * bounds.extent();
    let mut out = vec![March::miss(); rays.len()];
    let mut active: Vec<(usize, f64, f64)> = Vec::with_capacity(rays.len());
    for (i, r) in rays.iter().enumerate() {
        if let Some((t0, t1)) = bounds.ray_interval(&r.origin, &r.dir) {
            let end = t1.min(opts.max_distance);
            if t0 <= end {
                active.push((i, t0, end));
            }
        }
    }
    let mut points = Vec::with_capacity(active.len());
    for step in 0..opts.max_steps {
        if active.is_empty() {
            break;
        }
        points.clear();
        points.extend(active.iter().map(|&(i, d, _)| SpaceTimePoint::new(rays[i].origin + d * rays[i].dir, t)));
        let sdf = field.sdf_batch(&points)?;
        let mut next = Vec::with_capacity(active.len());
        for (&(i, d, end), s) in active.iter().zip(sdf) {
            let m = &mut out[i];
            m.steps = step + 1;
            if s < m.min_sdf {
                m.min_sdf = s;
                m.min_distance = d;
            }
            if s < eps {
                m.hit = true;
                m.distance = d;
                continue;
            }
            let nd = d + s;
            if nd <= end {
                next.push((i, nd, end));
            }
        }
        active = next;
    }
    Ok(out)
}

/// Unit SDF gradients by central differences with half-width `h`.
pub fn normals<F: IntrinsicField + ?Sized>(field: &F, points: &[Vec3], t: f64, h: f64) -> Result<Vec<Vec3>> {
    let mut stencil = Vec::with_capacity(points.len() * 6);
    for p in points {
        stencil.extend(stencil_points(p, h).map(|x| SpaceTimePoint::new(x, t)));
    }
    let s = field.sdf_batch(&stencil)?;
    Ok(s.chunks_exact(6).map(|c| stencil_normal(c, h)).collect())
}

/// `x +- h e_k` in the order `+x, -x, +y, -y, +z, -z`.
pub fn stencil_points(p: &Vec3, h: f64) -> [Vec3; 6] {
    let e = |k: usize, s: f64| {
        let mut q = *p;
        q[k] += s * h;
        q
    };
    [e(0, 1.0), e(0, -1.0), e(1, 1.0), e(1, -1.0), e(2, 1.0), e(2, -1.0)]
}

fn stencil_normal(s: &[f64], h: f64) -> Vec3 {
    let g = Vec3::new(s[0] - s[1], s[2] - s[3], s[4] - s[5]) / (2.0 * h);
    let l = g.norm();
    if l > 0.0 {
        g / l
    } else {
        Vec3::zeros()
    }
}

/// Batched primary-ray intersection with viewer-facing normals.
pub fn trace<F: IntrinsicField + ?Sized>(field: &F, rays: &[Ray], t: f64, opts: &TraceOptions) -> Result<Vec<SurfaceHit>> {
    let marches = march(field, rays, t, opts)?;
    let hits: Vec<usize> = (0..rays.len()).filter(|&i| marches[i].hit).collect();
    let pos: Vec<Vec3> = hits.iter().map(|&i| rays[i].origin + marches[i].distance * rays[i].dir).collect();
    let h = opts.normal_step * field.bounds().extent();
    let nrm = normals(field, &pos, t, h)?;
    let mut out = vec![
        SurfaceHit {
            position: Vec3::zeros(),
            normal: Vec3::zeros(),
            distance: f64::INFINITY,
            hit: false,
        };
        rays.len()
    ];
    for ((&i, p), n) in hits.iter().zip(pos).zip(nrm) {
        let n = if n.dot(&rays[i].dir) > 0.0 { -n } else { n };
        out[i] = SurfaceHit {
            position: p,
            normal: n,
            distance: marches[i].distance,
            hit: true,
        };
    }
    Ok(out)
}

/// Single-ray convenience wrapper around [`trace`].
pub fn sphere_trace<F: IntrinsicField + ?Sized>(
    field: &F,
    origin: Vec3,
    dir: Vec3,
    t: f64,
    opts: &TraceOptions,
) -> Result<SurfaceHit> {
    Ok(trace(field, &[Ray { origin, dir }], t, opts)?[0])
}

/// Binary visibility of shadow rays leaving surface points `x` with normals
/// `n` along `dirs`: 0 when the ray hits the field before leaving the bounds.
pub fn visibility_batch<F: IntrinsicField + ?Sized>(
    field: &F,
    starts: &[(Vec3, Vec3)],
    dirs: &[Vec3],
    t: f64,
    opts: &TraceOptions,
) -> Result<Vec<f64>> {
    let eps = opts.hit_epsilon * field.bounds().extent();
    let rays: Vec<Ray> = starts
        .iter()
        .zip(dirs)
        .map(|(&(x, n), &dir)| Ray {
            origin: x + 2.0 * eps * n,
            dir,
        })
        .collect();
    let unlimited = TraceOptions {
        max_distance: f64::INFINITY,
        ..*opts
    };
    Ok(march(field, &rays, t, &unlimited)?
        .iter()
        .map(|m| if m.hit { 0.0 } else { 1.0 })
        .collect())
}

pub fn visibility<F: IntrinsicField + ?Sized>(
    field: &F,
    x: Vec3,
    n: Vec3,
    wi: Vec3,
    t: f64,
    opts: &TraceOptions,
) -> Result<f64> {
    Ok(visibility_batch(field, &[(x, n)], &[wi], t, opts)?[0])
}
