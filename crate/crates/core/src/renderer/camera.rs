use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::Vec3;

/// Pinhole camera. `rotation` maps camera axes to world axes and
/// `translation` is the camera center in world space. The camera looks down
/// its local `-Z` axis with `+Y` up; pixel rows grow downward.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraPose {
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
    /// Vertical field of view in radians.
    pub fov_y: f64,
    pub width: usize,
    pub height: usize,
}

/// Spherical placement of a camera around a look-at center.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Orbit {
    /// Radians; 0 places the camera on the `+Z` side.
    pub azimuth: f64,
    /// Radians above the horizontal plane.
    pub elevation: f64,
    pub radius: f64,
    pub center: [f64; 3],
}

impl Orbit {
    pub fn eye(&self) -> Vec3 {
        let (sa, ca) = self.azimuth.sin_cos();
        let (se, ce) = self.elevation.sin_cos();
        Vec3::from(self.center) + self.radius * Vec3::new(ce * sa, se, ce * ca)
    }
}

impl CameraPose {
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, fov_y: f64, width: usize, height: usize) -> Result<Self> {
        let back = eye - target;
        if back.norm() < 1e-12 {
            return Err(Error::InvalidCamera("eye coincides with target".into()));
        }
        let z = back.normalize();
        let x = up.cross(&z);
        if x.norm() < 1e-12 {
            return Err(Error::InvalidCamera("up vector is parallel to the view direction".into()));
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let cam = CameraPose {
            rotation: Matrix3::from_columns(&[x, y, z]),
            translation: eye,
            fov_y,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn orbit(orbit: &Orbit, fov_y: f64, width: usize, height: usize) -> Result<Self> {
        let eye = orbit.eye();
        let target = Vec3::from(orbit.center);
        // At the poles the world up is parallel to the view axis.
        let up = if orbit.elevation.cos().abs() < 1e-9 {
            Vec3::new(-orbit.azimuth.sin(), 0.0, -orbit.azimuth.cos()) * orbit.elevation.sin().signum()
        } else {
            Vec3::y()
        };
        Self::look_at(eye, target, up, fov_y, width, height)
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        let err = (r.transpose() * r - Matrix3::identity()).abs().max();
        if !(err <= 1e-6) {
            return Err(Error::InvalidCamera(format!("rotation is not orthonormal (error {err:e})")));
        }
        let det = r.determinant();
        if !((det - 1.0).abs() <= 1e-6) {
            return Err(Error::InvalidCamera(format!("rotation determinant is {det}, expected +1")));
        }
        if !(self.fov_y > 0.0 && self.fov_y < std::f64::consts::PI) {
            return Err(Error::InvalidCamera(format!("field of view {} outside (0, pi)", self.fov_y)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidCamera("image size must be positive".into()));
        }
        if !self.translation.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidCamera("non-finite camera position".into()));
        }
        Ok(())
    }

    /// Focal length in pixels.
    pub fn focal(&self) -> f64 {
        0.5 * self.height as f64 / (0.5 * self.fov_y).tan()
    }

    pub fn forward(&self) -> Vec3 {
        -self.rotation.column(2).into_owned()
    }

    /// World-space ray through the center of pixel `(x, y)`.
    pub fn ray(&self, x: usize, y: usize) -> (Vec3, Vec3) {
        let f = self.focal();
        let dx = (x as f64 + 0.5 - 0.5 * self.width as f64) / f;
        let dy = -(y as f64 + 0.5 - 0.5 * self.height as f64) / f;
        let d = self.rotation * Vec3::new(dx, dy, -1.0);
        (self.translation, d.normalize())
    }

    /// Continuous pixel coordinates `(u, v)` and depth of a world point;
    /// pixel centers sit at half-integers. `None` behind the camera.
    pub fn project(&self, p: &Vec3) -> Option<(f64, f64, f64)> {
        let c = self.rotation.transpose() * (p - self.translation);
        let depth = -c.z;
        if depth <= 1e-9 {
            return None;
        }
        let f = self.focal();
        Some((
            0.5 * self.width as f64 + f * c.x / depth,
            0.5 * self.height as f64 - f * c.y / depth,
            depth,
        ))
    }

    /// `project` together with the gradients of `u` and `v` with respect to
    /// the world point.
    pub fn project_jacobian(&self, p: &Vec3) -> Option<((f64, f64, f64), [Vec3; 2])> {
        let c = self.rotation.transpose() * (p - self.translation);
        let depth = -c.z;
        if depth <= 1e-9 {
            return None;
        }
        let f = self.focal();
        let du = Vec3::new(f / depth, 0.0, f * c.x / (depth * depth));
        let dv = Vec3::new(0.0, -f / depth, -f * c.y / (depth * depth));
        Some((
            (
                0.5 * self.width as f64 + f * c.x / depth,
                0.5 * self.height as f64 - f * c.y / depth,
                depth,
            ),
            [self.rotation * du, self.rotation * dv],
        ))
    }

    /// Same pose and field of view at another resolution.
    pub fn resized(&self, width: usize, height: usize) -> Self {
        CameraPose {
            width,
            height,
            ..self.clone()
        }
    }
}
