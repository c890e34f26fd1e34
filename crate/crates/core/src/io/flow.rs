//! Dense 2D flow maps and the `FLW1` container.
//!
//! `FLW1` layout: magic, then `u32` frames, height, width, then
//! `frames x height x width x 2` f32 values, all little-endian. Masked
//! pixels are stored as NaN.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FLW1";

/// Per-pixel screen displacement with a coverage mask. Row-major, pixel
/// `(x, y)` at index `y * width + x`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowMap {
    pub width: usize,
    pub height: usize,
    pub flow: Vec<[f64; 2]>,
    pub mask: Vec<bool>,
}

impl FlowMap {
    pub fn empty(width: usize, height: usize) -> Self {
        FlowMap {
            width,
            height,
            flow: vec![[0.0; 2]; width * height],
            mask: vec![false; width * height],
        }
    }

    pub fn covered(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

pub fn encode(frames: &[FlowMap]) -> Vec<u8> {
    let (w, h) = frames.first().map(|f| (f.width, f.height)).unwrap_or((0, 0));
    let mut out = Vec::with_capacity(16 + frames.len() * w * h * 8);
    out.extend_from_slice(MAGIC);
    for v in [frames.len(), h, w] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for f in frames {
        for (v, &m) in f.flow.iter().zip(&f.mask) {
            for c in v {
                let x = if m { *c as f32 } else { f32::NAN };
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    out
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Vec<FlowMap>> {
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(Error::format("flow file", path, "missing FLW1 header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (n, h, w) = (word(0), word(1), word(2));
    let expected = n
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .and_then(|v| v.checked_mul(8))
        .and_then(|v| v.checked_add(16));
    if expected != Some(bytes.len()) {
        return Err(Error::format(
            "flow file",
            path,
            format!("size {} does not match {n} frames of {h}x{w}", bytes.len()),
        ));
    }
    let vals: Vec<f32> = bytes[16..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(vals
        .chunks_exact(w * h * 2)
        .map(|frame| {
            let mut m = FlowMap::empty(w, h);
            for (i, px) in frame.chunks_exact(2).enumerate() {
                if px[0].is_finite() && px[1].is_finite() {
                    m.flow[i] = [px[0] as f64, px[1] as f64];
                    m.mask[i] = true;
                }
            }
            m
        })
        .collect())
}

pub fn write(path: &Path, frames: &[FlowMap]) -> Result<()> {
    fs::write(path, encode(frames))?;
    Ok(())
}

pub fn read(path: &Path) -> Result<Vec<FlowMap>> {
    decode(&fs::read(path)?, path)
}
