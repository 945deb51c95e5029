//! Binary tensor blobs: a small header followed by a little-endian 32-bit
//! payload.
//!
//! ```text
//! magic  "BDT1"            4 bytes
//! dtype  u32 LE            1 = f32, 2 = u32
//! ndim   u32 LE
//! dims   ndim × u32 LE
//! data   prod(dims) × 4 bytes LE
//! ```

use std::path::Path;

use crate::error::{Error, IoContext, Result};

pub const MAGIC: &[u8; 4] = b"BDT1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32 = 1,
    U32 = 2,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Blob {
    F32 { dims: Vec<usize>, data: Vec<f32> },
    U32 { dims: Vec<usize>, data: Vec<u32> },
}

impl Blob {
    pub fn dims(&self) -> &[usize] {
        match self {
            Blob::F32 { dims, .. } | Blob::U32 { dims, .. } => dims,
        }
    }

    pub fn into_f32(self) -> Option<(Vec<usize>, Vec<f32>)> {
        match self {
            Blob::F32 { dims, data } => Some((dims, data)),
            Blob::U32 { .. } => None,
        }
    }

    pub fn into_u32(self) -> Option<(Vec<usize>, Vec<u32>)> {
        match self {
            Blob::U32 { dims, data } => Some((dims, data)),
            Blob::F32 { .. } => None,
        }
    }
}

pub fn header_len(ndim: usize) -> usize {
    12 + 4 * ndim
}

fn header(dtype: DType, dims: &[usize]) -> Vec<u8> {
    let mut out = Vec::with_capacity(header_len(dims.len()));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(dtype as u32).to_le_bytes());
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out
}

pub fn encode_f32(dims: &[usize], data: &[f32]) -> Vec<u8> {
    assert_eq!(dims.iter().product::<usize>(), data.len());
    let mut out = header(DType::F32, dims);
    out.reserve(data.len() * 4);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn encode_u32(dims: &[usize], data: &[u32]) -> Vec<u8> {
    assert_eq!(dims.iter().product::<usize>(), data.len());
    let mut out = header(DType::U32, dims);
    out.reserve(data.len() * 4);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn word(bytes: &[u8], at: usize) -> Option<u32> {
    bytes.get(at..at + 4).map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Blob> {
    let bad = |msg: &str| Error::Format { path: path.to_path_buf(), msg: msg.to_string() };
    if bytes.get(..4) != Some(MAGIC.as_slice()) {
        return Err(bad("bad magic"));
    }
    let dtype = word(bytes, 4).ok_or_else(|| bad("truncated header"))?;
    let ndim = word(bytes, 8).ok_or_else(|| bad("truncated header"))? as usize;
    if ndim > 16 {
        return Err(bad("implausible rank"));
    }
    let dims: Vec<usize> = (0..ndim)
        .map(|i| word(bytes, 12 + 4 * i).map(|d| d as usize))
        .collect::<Option<_>>()
        .ok_or_else(|| bad("truncated dims"))?;
    let n: usize = dims.iter().product();
    let payload = &bytes[header_len(ndim)..];
    if payload.len() != n * 4 {
        return Err(bad(&format!("payload is {} bytes, dims {dims:?} need {}", payload.len(), n * 4)));
    }
    let words = payload.chunks_exact(4).map(|b| [b[0], b[1], b[2], b[3]]);
    match dtype {
        1 => Ok(Blob::F32 { dims, data: words.map(f32::from_le_bytes).collect() }),
        2 => Ok(Blob::U32 { dims, data: words.map(u32::from_le_bytes).collect() }),
        _ => Err(bad("unknown dtype")),
    }
}

pub fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).at(parent)?;
    }
    std::fs::write(path, bytes).at(path)
}

pub fn write_f32(path: &Path, dims: &[usize], data: &[f32]) -> Result<()> {
    write(path, &encode_f32(dims, data))
}

pub fn write_u32(path: &Path, dims: &[usize], data: &[u32]) -> Result<()> {
    write(path, &encode_u32(dims, data))
}

pub fn read(path: &Path) -> Result<Blob> {
    let bytes = std::fs::read(path).at(path)?;
    decode(&bytes, path)
}

pub fn read_f32(path: &Path) -> Result<(Vec<usize>, Vec<f32>)> {
    read(path)?.into_f32().ok_or_else(|| Error::Format { path: path.to_path_buf(), msg: "expected f32 blob".into() })
}

pub fn read_u32(path: &Path) -> Result<(Vec<usize>, Vec<u32>)> {
    read(path)?.into_u32().ok_or_else(|| Error::Format { path: path.to_path_buf(), msg: "expected u32 blob".into() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn f32_blobs_round_trip(dims in proptest::collection::vec(1usize..5, 1..4), seed in any::<u32>()) {
            let n: usize = dims.iter().product();
            let data: Vec<f32> = (0..n).map(|i| (i as f32 + seed as f32).sin()).collect();
            let bytes = encode_f32(&dims, &data);
            prop_assert_eq!(decode(&bytes, Path::new("mem")).unwrap(), Blob::F32 { dims, data });
        }
    }

    #[test]
    fn rejects_corrupt_blobs() {
        let mut bytes = encode_u32(&[2], &[1, 2]);
        assert!(decode(&bytes[..bytes.len() - 1], Path::new("x")).is_err());
        bytes[0] = b'X';
        assert!(decode(&bytes, Path::new("x")).is_err());
    }
}
