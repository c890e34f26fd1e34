use std::f64::consts::PI;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::Image;
use crate::math::Vec3;

/// Equirectangular environment radiance with `+Y` up. Texel `(row, col)`
/// covers polar angle `acos(d.y)` in `[row, row + 1) * pi / height` and
/// azimuth `atan2(d.x, -d.z)` in `[col, col + 1) * 2 pi / width - pi`.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvironmentMap {
    width: usize,
    height: usize,
    texels: Vec<[f64; 3]>,
}

impl EnvironmentMap {
    pub fn new(width: usize, height: usize, texels: Vec<[f64; 3]>) -> Result<Self> {
        if width == 0 || height == 0 || texels.len() != width * height {
            return Err(Error::ShapeMismatch {
                expected: vec![height, width, 3],
                actual: vec![texels.len()],
            });
        }
        if texels.iter().flatten().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidConfig("environment radiance must be finite and nonnegative".into()));
        }
        Ok(EnvironmentMap { width, height, texels })
    }

    pub fn uniform(radiance: [f64; 3]) -> Self {
        EnvironmentMap {
            width: 1,
            height: 1,
            texels: vec![radiance],
        }
    }

    /// Procedural sky: bright zenith, darker ground and a soft sun lobe.
    pub fn sky(width: usize, height: usize) -> Self {
        let sun = Vec3::new(0.4, 0.75, 0.55).normalize();
        let texels = (0..height)
            .flat_map(|i| (0..width).map(move |j| (i, j)))
            .map(|(i, j)| {
                let d = Self::texel_direction(width, height, i, j);
                let up = 0.5 * (d.y + 1.0);
                let sky = [0.35 + 0.45 * up, 0.45 + 0.45 * up, 0.6 + 0.4 * up];
                let ground = [0.25, 0.22, 0.2];
                let s = if d.y > 0.0 { 1.0 } else { (1.0 + 4.0 * d.y).max(0.0) };
                let lobe = 2.5 * d.dot(&sun).max(0.0).powi(16);
                std::array::from_fn(|c| ground[c] + s * (sky[c] - ground[c]) + lobe)
            })
            .collect();
        EnvironmentMap { width, height, texels }
    }

    pub fn from_image(img: &Image) -> Result<Self> {
        let texels = (0..img.height)
            .flat_map(|y| (0..img.width).map(move |x| (x, y)))
            .map(|(x, y)| {
                let p = img.pixel(x, y);
                std::array::from_fn(|c| p[c.min(img.channels - 1)])
            })
            .collect();
        Self::new(img.width, img.height, texels)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_image(&Image::read_linear(path)?)
    }

    pub fn scaled(&self, s: f64) -> Self {
        EnvironmentMap {
            width: self.width,
            height: self.height,
            texels: self.texels.iter().map(|t| t.map(|v| v * s)).collect(),
        }
    }

    pub fn size(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    fn texel_direction(width: usize, height: usize, i: usize, j: usize) -> Vec3 {
        let theta = (i as f64 + 0.5) / height as f64 * PI;
        let phi = ((j as f64 + 0.5) / width as f64 - 0.5) * 2.0 * PI;
        Vec3::new(theta.sin() * phi.sin(), theta.cos(), -theta.sin() * phi.cos())
    }

    /// Continuous texel coordinates of a unit direction.
    pub fn direction_to_uv(d: &Vec3) -> (f64, f64) {
        let phi = d.x.atan2(-d.z);
        let theta = d.y.clamp(-1.0, 1.0).acos();
        (phi / (2.0 * PI) + 0.5, theta / PI)
    }

    /// Bilinear lookup, wrapping in azimuth and clamping at the poles.
    pub fn lookup(&self, d: &Vec3) -> [f64; 3] {
        if self.texels.len() == 1 {
            return self.texels[0];
        }
        let (u, v) = Self::direction_to_uv(d);
        let x = u * self.width as f64 - 0.5;
        let y = (v * self.height as f64 - 0.5).clamp(0.0, (self.height - 1) as f64);
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (x - x0, y - y0);
        let w = self.width as i64;
        let col = |c: i64| c.rem_euclid(w) as usize;
        let (c0, c1) = (col(x0 as i64), col(x0 as i64 + 1));
        let r0 = y0 as usize;
        let r1 = (r0 + 1).min(self.height - 1);
        let t = |r: usize, c: usize| self.texels[r * self.width + c];
        std::array::from_fn(|k| {
            let top = t(r0, c0)[k] * (1.0 - fx) + t(r0, c1)[k] * fx;
            let bot = t(r1, c0)[k] * (1.0 - fx) + t(r1, c1)[k] * fx;
            top * (1.0 - fy) + bot * fy
        })
    }
}
