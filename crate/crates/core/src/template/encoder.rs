//! Patch feature encoders.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::io::Image;

/// Image to `(H / p) x (W / p) x C` feature map.
pub trait FeatureEncoder {
    fn patch(&self) -> usize;
    fn channels(&self) -> usize;
    fn encode(&self, image: &Image) -> Result<Image>;
}

/// Deterministic stand-in encoder. Per patch it emits the mean RGB, the
/// per-channel RGB variance and a 4-bin histogram of luminance gradient
/// orientations (0, 45, 90 and 135 degrees, nearest bin, magnitude weighted).
///
/// Gradients are forward differences taken inside the patch only, so the
/// output of a patch depends on that patch alone.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ToyEncoder {
    pub patch: usize,
}

impl Default for ToyEncoder {
    fn default() -> Self {
        ToyEncoder { patch: 8 }
    }
}

pub const ORIENTATION_BINS: usize = 4;

pub fn luminance(rgb: &[f64]) -> f64 {
    0.2126 * rgb[0] + 0.7152 * rgb[1] + 0.0722 * rgb[2]
}

impl FeatureEncoder for ToyEncoder {
    fn patch(&self) -> usize {
        self.patch
    }

    fn channels(&self) -> usize {
        6 + ORIENTATION_BINS
    }

    fn encode(&self, image: &Image) -> Result<Image> {
        let p = self.patch;
        if p < 2 {
            return Err(Error::InvalidConfig(format!("patch size must be at least 2, got {p}")));
        }
        if image.channels != 3 {
            return Err(Error::ShapeMismatch {
                expected: vec![image.height, image.width, 3],
                actual: image.shape().to_vec(),
            });
        }
        if image.width % p != 0 || image.height % p != 0 || image.width == 0 || image.height == 0 {
            return Err(Error::InvalidConfig(format!(
                "image {}x{} is not divisible into {p}x{p} patches",
                image.width, image.height
            )));
        }
        let (gw, gh) = (image.width / p, image.height / p);
        let c = self.channels();
        let mut out = Image::new(gw, gh, c);
        for py in 0..gh {
            for px in 0..gw {
                let feat = out.pixel_mut(px, py);
                let at = |x: usize, y: usize| image.pixel(px * p + x, py * p + y);
                let count = (p * p) as f64;
                for y in 0..p {
                    for x in 0..p {
                        for k in 0..3 {
                            feat[k] += at(x, y)[k] / count;
                        }
                    }
                }
                for y in 0..p {
                    for x in 0..p {
                        for k in 0..3 {
                            feat[3 + k] += (at(x, y)[k] - feat[k]).powi(2) / count;
                        }
                    }
                }
                let cells = ((p - 1) * (p - 1)) as f64;
                for y in 0..p - 1 {
                    for x in 0..p - 1 {
                        let l = luminance(at(x, y));
                        let gx = luminance(at(x + 1, y)) - l;
                        let gy = luminance(at(x, y + 1)) - l;
                        let mag = (gx * gx + gy * gy).sqrt();
                        if mag == 0.0 {
                            continue;
                        }
                        let angle = gy.atan2(gx).rem_euclid(PI);
                        let bin = (angle / (PI / ORIENTATION_BINS as f64)).round() as usize % ORIENTATION_BINS;
                        feat[6 + bin] += mag / cells;
                    }
                }
            }
        }
        Ok(out)
    }
}

pub fn encode_features(image: &Image, encoder: &dyn FeatureEncoder) -> Result<Image> {
    let out = encoder.encode(image)?;
    let p = encoder.patch();
    if out.width * p != image.width || out.height * p != image.height || out.channels != encoder.channels() {
        return Err(Error::ShapeMismatch {
            expected: vec![image.height / p, image.width / p, encoder.channels()],
            actual: out.shape().to_vec(),
        });
    }
    Ok(out)
}
