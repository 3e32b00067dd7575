//! Raw little-endian payload files and JSON manifests shared by the dataset,
//! checkpoint and memory-bank formats.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub fn write_f32_le(path: &Path, values: impl IntoIterator<Item = f64>) -> Result<()> {
    let bytes: Vec<u8> = values
        .into_iter()
        .flat_map(|v| (v as f32).to_le_bytes())
        .collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads exactly `count` f32 values. Length mismatches and non-finite
/// values are errors.
pub fn read_f32_le(path: &Path, count: usize) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let expected = count as u64 * 4;
    if bytes.len() as u64 != expected {
        return Err(Error::ByteLength {
            file: path.to_path_buf(),
            expected,
            actual: bytes.len() as u64,
        });
    }
    let mut out = Vec::with_capacity(count);
    for (offset, chunk) in bytes.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        if !v.is_finite() {
            return Err(Error::NonFinite {
                context: path.display().to_string(),
                offset,
            });
        }
        out.push(v as f64);
    }
    Ok(out)
}

pub fn write_u8(path: &Path, values: &[u8]) -> Result<()> {
    fs::write(path, values).map_err(|e| Error::io(path, e))
}

pub fn read_u8(path: &Path, count: usize) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != count {
        return Err(Error::ByteLength {
            file: path.to_path_buf(),
            expected: count as u64,
            actual: bytes.len() as u64,
        });
    }
    Ok(bytes)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Resolves a payload file name relative to the manifest's directory.
pub fn sibling(manifest: &Path, file: &str) -> PathBuf {
    manifest
        .parent()
        .map_or_else(|| PathBuf::from(file), |dir| dir.join(file))
}

pub fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    Ok(())
}
