//! Random camera and timestamp draws.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::renderer::{CameraPose, Orbit};

/// Orbit ranges in degrees; ranges are `[lo, hi)` and may be degenerate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ViewSampling {
    pub azimuth_deg: [f64; 2],
    pub elevation_deg: [f64; 2],
    pub radius: f64,
    pub center: [f64; 3],
    pub fov_y: f64,
    pub width: usize,
    pub height: usize,
}

impl Default for ViewSampling {
    fn default() -> Self {
        ViewSampling {
            azimuth_deg: [0.0, 360.0],
            elevation_deg: [0.0, 30.0],
            radius: 3.0,
            center: [0.0; 3],
            fov_y: 0.7,
            width: 64,
            height: 64,
        }
    }
}

impl ViewSampling {
    pub fn validate(&self) -> Result<()> {
        let [a0, a1] = self.azimuth_deg;
        let [e0, e1] = self.elevation_deg;
        if !(a0 <= a1 && a0.is_finite() && a1.is_finite()) {
            return Err(Error::InvalidConfig(format!("azimuth range [{a0}, {a1}] is empty")));
        }
        if !(e0 <= e1 && e0 >= -90.0 && e1 <= 90.0) {
            return Err(Error::InvalidConfig(format!("elevation range [{e0}, {e1}] must lie in [-90, 90]")));
        }
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(Error::InvalidConfig(format!("orbit radius must be positive, got {}", self.radius)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidConfig("render size must be positive".into()));
        }
        Ok(())
    }

    pub fn camera(&self, orbit: &Orbit) -> Result<CameraPose> {
        CameraPose::orbit(orbit, self.fov_y, self.width, self.height)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewTime {
    pub camera: CameraPose,
    pub orbit: Orbit,
    pub t: f64,
}

/// Draws azimuth, elevation and `t in [0, 1)` uniformly, in that order.
pub fn sample_view_time(rng: &mut impl Rng, config: &ViewSampling) -> Result<ViewTime> {
    config.validate()?;
    let [a0, a1] = config.azimuth_deg.map(f64::to_radians);
    let [e0, e1] = config.elevation_deg.map(f64::to_radians);
    let azimuth = a0 + (a1 - a0) * rng.gen::<f64>();
    let elevation = e0 + (e1 - e0) * rng.gen::<f64>();
    let t = rng.gen::<f64>();
    let orbit = Orbit {
        azimuth,
        elevation,
        radius: config.radius,
        center: config.center,
    };
    Ok(ViewTime {
        camera: config.camera(&orbit)?,
        orbit,
        t,
    })
}
