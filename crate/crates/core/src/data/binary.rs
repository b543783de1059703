//! The `CRFT` dense matrix container shared by feature files and
//! checkpoint tensors: magic `CRFT`, u32 version, u32 row count, u32 row
//! width, then `count × dim` little-endian f32 values.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CRFT";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

pub fn encode(count: usize, dim: usize, values: &[f32]) -> Vec<u8> {
    debug_assert_eq!(count * dim, values.len());
    let mut out = Vec::with_capacity(HEADER_LEN + values.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(count as u32).to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn is_crft(bytes: &[u8]) -> bool {
    bytes.len() >= 4 && &bytes[..4] == MAGIC
}

pub fn decode(path: &Path, bytes: &[u8]) -> Result<(usize, usize, Vec<f32>)> {
    let bad = |msg: String| Error::Format {
        path: path.to_path_buf(),
        msg,
    };
    if bytes.len() < HEADER_LEN || !is_crft(bytes) {
        return Err(bad("missing CRFT header".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != VERSION {
        return Err(bad(format!("unsupported CRFT version {version}")));
    }
    let count = word(8) as usize;
    let dim = word(12) as usize;
    let body = &bytes[HEADER_LEN..];
    if body.len() != count * dim * 4 {
        return Err(bad(format!(
            "expected {} payload bytes for {count}×{dim}, found {}",
            count * dim * 4,
            body.len()
        )));
    }
    let values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((count, dim, values))
}

pub fn write(path: &Path, count: usize, dim: usize, values: &[f32]) -> Result<()> {
    fs::write(path, encode(count, dim, values)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(path, &bytes)
}
