//! Weight files: a JSON manifest (spec plus tensor table) next to a blob of
//! little-endian `f32` values, row-major, concatenated in manifest order.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{from_tensors, tensor_layout, Model, ModelSpec};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "model.json";
pub const BLOB_FILE: &str = "model.bin";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<serde_json::Value>,
    pub spec: ModelSpec,
    pub tensors: Vec<TensorEntry>,
}

impl Manifest {
    pub fn for_model(model: &Model) -> Self {
        let mut offset = 0;
        let tensors = model
            .tensor_infos()
            .into_iter()
            .map(|info| {
                let n: usize = info.shape.iter().product();
                let entry = TensorEntry {
                    name: info.name,
                    shape: info.shape,
                    offset,
                };
                offset += 4 * n;
                entry
            })
            .collect();
        Self {
            meta: None,
            spec: model.spec().clone(),
            tensors,
        }
    }
}

/// Write `model.json` and `model.bin` into `dir`, creating it if needed.
pub fn save_model(model: &Model, dir: &Path, meta: Option<serde_json::Value>) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = Manifest::for_model(model);
    manifest.meta = meta;
    let mut blob = Vec::new();
    for t in model.tensor_data() {
        for v in t {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(dir.join(BLOB_FILE), blob)?;
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(dir.join(MANIFEST_FILE), text)?;
    Ok(())
}

pub fn load_model(dir: &Path) -> Result<Model> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let blob_path = dir.join(BLOB_FILE);
    for p in [&manifest_path, &blob_path] {
        if !p.exists() {
            return Err(Error::MissingArtifact(p.clone()));
        }
    }
    let manifest: Manifest = serde_json::from_slice(&fs::read(&manifest_path)?)?;
    let blob = fs::read(&blob_path)?;
    model_from_parts(&manifest, &blob)
}

pub(crate) fn model_from_parts(manifest: &Manifest, blob: &[u8]) -> Result<Model> {
    manifest.spec.validate()?;
    let layout = tensor_layout(&manifest.spec);
    let expected: HashMap<&str, &[usize]> = layout
        .iter()
        .map(|t| (t.name.as_str(), t.shape.as_slice()))
        .collect();

    let mut by_name: HashMap<&str, &TensorEntry> = HashMap::new();
    for entry in &manifest.tensors {
        let Some(shape) = expected.get(entry.name.as_str()) else {
            return Err(Error::UnknownTensorName(entry.name.clone()));
        };
        if *shape != entry.shape.as_slice() {
            return Err(Error::ManifestMismatch(format!(
                "tensor {} has shape {:?}, spec requires {:?}",
                entry.name, entry.shape, shape
            )));
        }
        if by_name.insert(&entry.name, entry).is_some() {
            return Err(Error::ManifestMismatch(format!(
                "tensor {} listed twice",
                entry.name
            )));
        }
    }

    let mut tensors = Vec::with_capacity(layout.len());
    for info in &layout {
        let entry = by_name
            .get(info.name.as_str())
            .ok_or_else(|| Error::ManifestMismatch(format!("tensor {} missing from manifest", info.name)))?;
        let n: usize = info.shape.iter().product();
        let end = entry.offset + 4 * n;
        if end > blob.len() {
            return Err(Error::TruncatedBlob {
                needed: end,
                actual: blob.len(),
            });
        }
        let values = blob[entry.offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.push(values);
    }
    from_tensors(manifest.spec.clone(), tensors)
}
