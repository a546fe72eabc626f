//! Binary frame-feature files: magic `SLTF`, version, `T`, `d` (all u32
//! little-endian) followed by `T * d` little-endian f32 values, row-major.

use std::fs;
use std::path::Path;

use crate::numerics::Tensor;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SLTF";
pub const VERSION: u32 = 1;

pub fn encode_features(frames: &Tensor) -> Vec<u8> {
    let (t, d) = (frames.rows(), frames.cols());
    let mut out = Vec::with_capacity(16 + 4 * t * d);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(t as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    for &v in frames.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_features(bytes: &[u8]) -> Result<Tensor> {
    let bad = |reason: &str| Error::Corpus(format!("feature file: {reason}"));
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(bad("bad magic"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    if word(4) != VERSION {
        return Err(bad(&format!("unsupported version {}", word(4))));
    }
    let (t, d) = (word(8) as usize, word(12) as usize);
    if t == 0 || d == 0 {
        return Err(bad("empty feature matrix"));
    }
    let body = &bytes[16..];
    if body.len() != 4 * t * d {
        return Err(bad(&format!("expected {} values, found {} bytes", t * d, body.len())));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Ok(Tensor::matrix(t, d, data))
}

pub fn write_features(path: &Path, frames: &Tensor) -> Result<()> {
    fs::write(path, encode_features(frames)).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes)
}
