//! Little-endian array encoding shared by the dataset, checkpoint and export formats.

use crate::error::{Error, Result};

pub fn encode_f32(values: impl IntoIterator<Item = f32>) -> Vec<u8> {
    values.into_iter().flat_map(f32::to_le_bytes).collect()
}

/// Encodes `f64` values after rounding to `f32`.
pub fn encode_f64_as_f32(values: &[f64]) -> Vec<u8> {
    encode_f32(values.iter().map(|&v| v as f32))
}

pub fn decode_f32(bytes: &[u8]) -> Result<Vec<f32>> {
    if bytes.len() % 4 != 0 {
        return Err(Error::Shape(format!("{} bytes is not a whole number of float32 values", bytes.len())));
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

pub fn decode_f32_as_f64(bytes: &[u8]) -> Result<Vec<f64>> {
    Ok(decode_f32(bytes)?.into_iter().map(f64::from).collect())
}

pub fn encode_i32(values: impl IntoIterator<Item = i32>) -> Vec<u8> {
    values.into_iter().flat_map(i32::to_le_bytes).collect()
}

pub fn decode_i32(bytes: &[u8]) -> Result<Vec<i32>> {
    if bytes.len() % 4 != 0 {
        return Err(Error::Shape(format!("{} bytes is not a whole number of int32 values", bytes.len())));
    }
    Ok(bytes.chunks_exact(4).map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

/// Product of `shape`, or an error on overflow.
pub fn checked_numel(shape: &[usize]) -> Result<usize> {
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Shape(format!("shape {shape:?} overflows")))
}

/// Accepts only plain file names so manifests cannot point outside their directory.
pub fn check_file_name(name: &str) -> Result<()> {
    let ok = !name.is_empty()
        && name != "."
        && name != ".."
        && !name.contains(['/', '\\', '\0'])
        && !name.starts_with('.');
    if ok {
        Ok(())
    } else {
        Err(Error::Manifest(format!("array file name {name:?} is not a plain file name")))
    }
}
