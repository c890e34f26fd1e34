//! Float images and their PNG/EXR encodings.

use std::path::Path;

use image::{ImageBuffer, Rgb, Rgb32FImage};

use crate::error::{Error, Result};

/// Row-major float image, pixel `(x, y)` channel `c` at
/// `(y * width + x) * channels + c`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Image {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn filled(width: usize, height: usize, value: &[f64]) -> Self {
        let mut img = Self::new(width, height, value.len());
        for px in img.data.chunks_exact_mut(value.len()) {
            px.copy_from_slice(value);
        }
        img
    }

    pub fn from_data(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::ShapeMismatch {
                expected: vec![height, width, channels],
                actual: vec![data.len()],
            });
        }
        Ok(Image {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.height, self.width, self.channels]
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f64] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    pub fn mse(&self, other: &Image) -> Result<f64> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                expected: self.shape().to_vec(),
                actual: other.shape().to_vec(),
            });
        }
        let n = self.data.len().max(1) as f64;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n)
    }

    /// PSNR in dB for a peak value of 1.
    pub fn psnr(&self, other: &Image) -> Result<f64> {
        let mse = self.mse(other)?;
        Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
    }

    fn to_rgb32f(&self) -> Rgb32FImage {
        ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
            let p = self.pixel(x as usize, y as usize);
            let c = |k: usize| p[k.min(self.channels - 1)] as f32;
            Rgb([c(0), c(1), c(2)])
        })
    }

    /// Writes an 8-bit PNG with the sRGB transfer curve applied.
    pub fn write_png(&self, path: &Path) -> Result<()> {
        self.to_png_image().save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    pub fn to_png_image(&self) -> image::RgbImage {
        ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
            let p = self.pixel(x as usize, y as usize);
            let c = |k: usize| (linear_to_srgb(p[k.min(self.channels - 1)]) * 255.0 + 0.5).floor() as u8;
            Rgb([c(0), c(1), c(2)])
        })
    }

    /// Writes linear float RGB as OpenEXR.
    pub fn write_exr(&self, path: &Path) -> Result<()> {
        self.to_rgb32f().save_with_format(path, image::ImageFormat::OpenExr)?;
        Ok(())
    }

    /// Reads any supported image as linear float RGB. 8-bit inputs are
    /// assumed sRGB-encoded and linearised.
    pub fn read_linear(path: &Path) -> Result<Self> {
        let dynimg = image::open(path)?;
        let is_float = matches!(
            dynimg,
            image::DynamicImage::ImageRgb32F(_) | image::DynamicImage::ImageRgba32F(_)
        );
        let rgb = dynimg.to_rgb32f();
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        let data = rgb
            .into_raw()
            .into_iter()
            .map(|v| if is_float { v as f64 } else { srgb_to_linear(v as f64) })
            .collect();
        Self::from_data(w, h, 3, data)
    }
}

pub fn linear_to_srgb(v: f64) -> f64 {
    let v = v.clamp(0.0, 1.0);
    if v <= 0.003_130_8 {
        12.92 * v
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    }
}

pub fn srgb_to_linear(v: f64) -> f64 {
    if v <= 0.040_45 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}
