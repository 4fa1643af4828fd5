//! Headerless little-endian IEEE-754 `f32` payloads.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub fn encode_f32(values: &[f64], out: &mut Vec<u8>) {
    out.reserve(values.len() * 4);
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

pub fn decode_f32(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect()
}

pub fn write_f32(path: &Path, values: &[f64]) -> Result<()> {
    let mut buf = Vec::new();
    encode_f32(values, &mut buf);
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Reads exactly `expected` values, rejecting size mismatches and non-finite entries.
pub fn read_f32(path: &Path, expected: usize) -> Result<Vec<f64>> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::MissingFile(path.to_path_buf()))
        }
        Err(e) => return Err(Error::io(path, e)),
    };
    if bytes.len() as u64 != expected as u64 * 4 {
        return Err(Error::SizeMismatch {
            path: path.to_path_buf(),
            expected: expected as u64 * 4,
            actual: bytes.len() as u64,
        });
    }
    let values = decode_f32(&bytes);
    if let Some(index) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinitePayload {
            path: path.to_path_buf(),
            index,
        });
    }
    Ok(values)
}

/// Size of a file in bytes, mapping absence to [`Error::MissingFile`].
pub fn file_len(path: &Path) -> Result<u64> {
    match fs::metadata(path) {
        Ok(m) => Ok(m.len()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            Err(Error::MissingFile(path.to_path_buf()))
        }
        Err(e) => Err(Error::io(path, e)),
    }
}
