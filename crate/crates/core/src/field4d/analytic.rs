//! Closed-form fields used as ground truth and test fixtures.

use crate::error::Result;
use crate::math::{Aabb, Vec3};

use super::{FieldSample, IntrinsicField, SpaceTimePoint};

/// Material whose diffuse color moves linearly from `k_d0` at `t = 0` to
/// `k_d1` at `t = 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnalyticMaterial {
    pub k_d0: [f64; 3],
    pub k_d1: [f64; 3],
    pub roughness: f64,
    pub metallic: f64,
}

impl AnalyticMaterial {
    pub fn constant(k_d: [f64; 3], roughness: f64, metallic: f64) -> Self {
        AnalyticMaterial {
            k_d0: k_d,
            k_d1: k_d,
            roughness,
            metallic,
        }
    }

    fn at(&self, t: f64) -> ([f64; 3], [f64; 3]) {
        let k_d = std::array::from_fn(|i| self.k_d0[i] + (self.k_d1[i] - self.k_d0[i]) * t);
        (k_d, [1.0, self.roughness, self.metallic])
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Shape {
    /// Sphere whose radius moves linearly from `r0` at `t = 0` to `r1` at `t = 1`.
    Sphere { center: Vec3, r0: f64, r1: f64 },
    /// Solid half-space `n . x <= offset`.
    HalfSpace { normal: Vec3, offset: f64 },
    /// Hollow sphere of radius `radius` and wall thickness `2 * half_width`.
    Shell { center: Vec3, radius: f64, half_width: f64 },
}

impl Shape {
    pub fn sdf(&self, x: &Vec3, t: f64) -> f64 {
        match *self {
            Shape::Sphere { center, r0, r1 } => (x - center).norm() - (r0 + (r1 - r0) * t),
            Shape::HalfSpace { normal, offset } => normal.dot(x) - offset,
            Shape::Shell {
                center,
                radius,
                half_width,
            } => ((x - center).norm() - radius).abs() - half_width,
        }
    }
}

/// Union of analytic shapes, each with its own material.
#[derive(Clone, Debug, PartialEq)]
pub struct AnalyticField {
    pub bounds: Aabb,
    pub parts: Vec<(Shape, AnalyticMaterial)>,
}

impl AnalyticField {
    pub fn new(bounds: Aabb) -> Self {
        AnalyticField {
            bounds,
            parts: Vec::new(),
        }
    }

    pub fn with(mut self, shape: Shape, material: AnalyticMaterial) -> Self {
        self.parts.push((shape, material));
        self
    }

    /// Static sphere at the origin.
    pub fn sphere(radius: f64, material: AnalyticMaterial) -> Self {
        Self::new(Aabb::default()).with(
            Shape::Sphere {
                center: Vec3::zeros(),
                r0: radius,
                r1: radius,
            },
            material,
        )
    }

    fn eval(&self, p: &SpaceTimePoint) -> FieldSample {
        let mut best = (f64::INFINITY, None);
        for (shape, mat) in &self.parts {
            let d = shape.sdf(&p.x, p.t);
            if d < best.0 {
                best = (d, Some(mat));
            }
        }
        let (k_d, k_orm) = best.1.map(|m| m.at(p.t)).unwrap_or(([0.0; 3], [1.0, 1.0, 0.0]));
        FieldSample {
            sdf: best.0,
            k_d,
            k_orm,
        }
    }
}

impl IntrinsicField for AnalyticField {
    fn bounds(&self) -> Aabb {
        self.bounds
    }

    fn sdf_batch(&self, points: &[SpaceTimePoint]) -> Result<Vec<f64>> {
        Ok(points.iter().map(|p| self.eval(p).sdf).collect())
    }

    fn sample_batch(&self, points: &[SpaceTimePoint]) -> Result<Vec<FieldSample>> {
        Ok(points.iter().map(|p| self.eval(p)).collect())
    }
}
