use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor2};
use crate::binio;
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

/// Checkpoint manifest: tensor names and shapes, one raw f32 payload with the
/// tensors concatenated in manifest order, plus an opaque model config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    pub payload: String,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub config: serde_json::Value,
}

pub fn save_checkpoint(path: &Path, store: &ParamStore, config: serde_json::Value) -> Result<()> {
    binio::ensure_parent(path)?;
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("checkpoint");
    let payload = format!("{stem}.f32");
    let tensors = store
        .ids()
        .map(|id| {
            let v = store.value(id);
            TensorEntry {
                name: store.name(id).to_string(),
                rows: v.rows(),
                cols: v.cols(),
            }
        })
        .collect();
    binio::write_f32_le(
        &binio::sibling(path, &payload),
        store.values().iter().flat_map(|t| t.data().iter().copied()),
    )?;
    binio::write_json(
        path,
        &CheckpointManifest {
            version: CHECKPOINT_VERSION,
            payload,
            tensors,
            config,
        },
    )
}

pub fn load_checkpoint(path: &Path) -> Result<(Vec<(String, Tensor2)>, serde_json::Value)> {
    let manifest: CheckpointManifest = binio::read_json(path)?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::Invalid(format!(
            "unsupported checkpoint version {}",
            manifest.version
        )));
    }
    let total: usize = manifest.tensors.iter().map(|t| t.rows * t.cols).sum();
    let flat = binio::read_f32_le(&binio::sibling(path, &manifest.payload), total)?;
    let mut offset = 0;
    let mut out = Vec::with_capacity(manifest.tensors.len());
    for t in &manifest.tensors {
        let n = t.rows * t.cols;
        out.push((
            t.name.clone(),
            Tensor2::from_vec(t.rows, t.cols, flat[offset..offset + n].to_vec())?,
        ));
        offset += n;
    }
    Ok((out, manifest.config))
}
