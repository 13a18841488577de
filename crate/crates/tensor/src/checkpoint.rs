//! Weight files: a JSON manifest next to a raw little-endian `f64` blob.
//!
//! `save(path)` writes the manifest to `path` and the blob to
//! `path.with_extension("bin")`; the manifest records the blob file name so
//! the pair can be moved together.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::{ParamSet, Tensor};

pub const FORMAT: &str = "hepadet-weights-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub dtype: String,
    pub blob: String,
    pub total_bytes: u64,
    pub tensors: Vec<Entry>,
}

pub fn save(path: &Path, params: &ParamSet) -> Result<()> {
    let blob_path = path.with_extension("bin");
    let blob_name = blob_path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| TensorError::Checkpoint(format!("bad path {}", path.display())))?
        .to_string();
    let mut bytes = Vec::new();
    let mut tensors = Vec::with_capacity(params.len());
    for (name, t) in params {
        tensors.push(Entry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset: bytes.len() as u64,
        });
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        dtype: "f64le".into(),
        blob: blob_name,
        total_bytes: bytes.len() as u64,
        tensors,
    };
    fs::write(&blob_path, &bytes)?;
    fs::write(path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ParamSet> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(path)?)?;
    if manifest.format != FORMAT || manifest.dtype != "f64le" {
        return Err(TensorError::Checkpoint(format!(
            "unsupported format {} / {}",
            manifest.format, manifest.dtype
        )));
    }
    let blob_path = path.with_file_name(&manifest.blob);
    let bytes = fs::read(&blob_path)?;
    if bytes.len() as u64 != manifest.total_bytes {
        return Err(TensorError::Checkpoint(format!(
            "blob {} has {} bytes, manifest says {}",
            blob_path.display(),
            bytes.len(),
            manifest.total_bytes
        )));
    }
    let mut params = ParamSet::new();
    for e in manifest.tensors {
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start + n * 8;
        let raw = bytes.get(start..end).ok_or_else(|| {
            TensorError::Checkpoint(format!("{} runs past the end of the blob", e.name))
        })?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.insert(e.name, Tensor::new(e.shape, data)?);
    }
    Ok(params)
}

/// Copies every tensor of `source` whose name and shape exist in `target`.
///
/// Returns the names that were imported; this is the hook for starting from
/// weights trained elsewhere.
pub fn import_matching(target: &mut ParamSet, source: &ParamSet) -> Vec<String> {
    let mut imported = Vec::new();
    for (name, t) in source {
        if let Some(slot) = target.get_mut(name) {
            if slot.shape() == t.shape() {
                *slot = t.clone();
                imported.push(name.clone());
            }
        }
    }
    imported
}
