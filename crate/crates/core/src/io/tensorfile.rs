//! Tensor container used for checkpoints and PCA bases.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "I4D1" | u32 meta_len | meta (JSON) | u32 count
//!        | count x (u32 name_len | name | u8 dtype | u32 ndim | ndim x u64 dim)
//!        | raw data of every array in manifest order
//! ```
//!
//! `dtype` is 0 for f32 and 1 for f64.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"I4D1";

#[derive(Clone, Debug, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

impl NamedArray {
    pub fn f64(name: &str, shape: Vec<usize>, data: Vec<f64>) -> Self {
        NamedArray {
            name: name.to_string(),
            shape,
            data: ArrayData::F64(data),
        }
    }

    pub fn f32(name: &str, shape: Vec<usize>, data: Vec<f32>) -> Self {
        NamedArray {
            name: name.to_string(),
            shape,
            data: ArrayData::F32(data),
        }
    }

    pub fn len(&self) -> usize {
        match &self.data {
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_f64(&self) -> Vec<f64> {
        match &self.data {
            ArrayData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            ArrayData::F64(v) => v.clone(),
        }
    }
}

pub fn encode(meta: &serde_json::Value, arrays: &[NamedArray]) -> Result<Vec<u8>> {
    let meta = serde_json::to_vec(meta)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for a in arrays {
        let n: usize = a.shape.iter().product();
        if n != a.len() {
            return Err(Error::ShapeMismatch {
                expected: a.shape.clone(),
                actual: vec![a.len()],
            });
        }
        out.extend_from_slice(&(a.name.len() as u32).to_le_bytes());
        out.extend_from_slice(a.name.as_bytes());
        out.push(match a.data {
            ArrayData::F32(_) => 0,
            ArrayData::F64(_) => 1,
        });
        out.extend_from_slice(&(a.shape.len() as u32).to_le_bytes());
        for &d in &a.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
    }
    for a in arrays {
        match &a.data {
            ArrayData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            ArrayData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }
    Ok(out)
}

fn take<const N: usize>(cur: &mut Cursor<&[u8]>) -> std::io::Result<[u8; N]> {
    let mut b = [0u8; N];
    cur.read_exact(&mut b)?;
    Ok(b)
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<(serde_json::Value, Vec<NamedArray>)> {
    let fail = |reason: &str| Error::format("tensor container", path, reason);
    let mut cur = Cursor::new(bytes);
    let short = |_| fail("truncated file");
    if &take::<4>(&mut cur).map_err(short)? != MAGIC {
        return Err(fail("bad magic, expected I4D1"));
    }
    let meta_len = u32::from_le_bytes(take(&mut cur).map_err(short)?) as usize;
    let start = cur.position() as usize;
    let meta_bytes = bytes.get(start..start + meta_len).ok_or_else(|| fail("truncated metadata"))?;
    let meta: serde_json::Value =
        serde_json::from_slice(meta_bytes).map_err(|e| fail(&format!("metadata is not JSON: {e}")))?;
    cur.set_position((start + meta_len) as u64);
    let count = u32::from_le_bytes(take(&mut cur).map_err(short)?) as usize;
    let mut headers = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name_len = u32::from_le_bytes(take(&mut cur).map_err(short)?) as usize;
        let p = cur.position() as usize;
        let name = bytes.get(p..p + name_len).ok_or_else(|| fail("truncated array name"))?;
        let name = String::from_utf8(name.to_vec()).map_err(|_| fail("array name is not UTF-8"))?;
        cur.set_position((p + name_len) as u64);
        let dtype = take::<1>(&mut cur).map_err(short)?[0];
        if dtype > 1 {
            return Err(fail(&format!("unknown dtype code {dtype} for `{name}`")));
        }
        let ndim = u32::from_le_bytes(take(&mut cur).map_err(short)?) as usize;
        if ndim > 16 {
            return Err(fail(&format!("array `{name}` has {ndim} dimensions")));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u64::from_le_bytes(take(&mut cur).map_err(short)?) as usize);
        }
        headers.push((name, dtype, shape));
    }
    let mut arrays = Vec::with_capacity(headers.len());
    let mut p = cur.position() as usize;
    for (name, dtype, shape) in headers {
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| fail("array size overflows"))?;
        let width = if dtype == 0 { 4 } else { 8 };
        let end = n
            .checked_mul(width)
            .and_then(|b| b.checked_add(p))
            .ok_or_else(|| fail("array size overflows"))?;
        let raw = bytes.get(p..end).ok_or_else(|| fail("truncated array data"))?;
        let data = if dtype == 0 {
            ArrayData::F32(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
        } else {
            ArrayData::F64(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
        };
        arrays.push(NamedArray { name, shape, data });
        p = end;
    }
    if p != bytes.len() {
        return Err(fail("trailing bytes after array data"));
    }
    Ok((meta, arrays))
}

pub fn write(path: &Path, meta: &serde_json::Value, arrays: &[NamedArray]) -> Result<()> {
    fs::write(path, encode(meta, arrays)?)?;
    Ok(())
}

pub fn read(path: &Path) -> Result<(serde_json::Value, Vec<NamedArray>)> {
    decode(&fs::read(path)?, path)
}
