//! Checkpoint files: a JSON manifest next to a raw little-endian f32 blob.
//!
//! For every parameter the manifest records its name, shape and the byte
//! offsets of its value and both Adam moments inside the blob. The blob lives
//! beside the manifest with the same stem and a `.bin` extension.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Model, ModelConfig};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub value_offset: u64,
    pub adam_m_offset: u64,
    pub adam_v_offset: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub model: ModelConfig,
    pub seed: u64,
    pub adam_step: u64,
    /// File name of the blob, relative to the manifest.
    pub blob: String,
    pub blob_bytes: u64,
    pub params: Vec<ParamEntry>,
}

/// Blob path belonging to a manifest path.
pub fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

fn push_f32(buf: &mut Vec<u8>, t: &Tensor<f32>) -> u64 {
    let offset = buf.len() as u64;
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    offset
}

/// Writes `model` (parameters, Adam moments, step) to `path` and its blob.
pub fn save(path: &Path, model: &Model) -> Result<()> {
    let mut blob = Vec::with_capacity(model.param_count() * 12);
    let mut params = Vec::with_capacity(model.params().len());
    for p in model.params().iter() {
        params.push(ParamEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            value_offset: push_f32(&mut blob, &p.value),
            adam_m_offset: push_f32(&mut blob, &p.adam_m),
            adam_v_offset: push_f32(&mut blob, &p.adam_v),
        });
    }
    let bin = blob_path(path);
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        model: model.config().clone(),
        seed: model.seed(),
        adam_step: model.step(),
        blob: bin
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        blob_bytes: blob.len() as u64,
        params,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(&bin, &blob).map_err(|e| Error::io(&bin, e))?;
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(path, json).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn read_f32(blob: &[u8], offset: u64, count: usize, name: &str) -> Result<Vec<f32>> {
    let start = offset as usize;
    let end = start + 4 * count;
    if end > blob.len() {
        return Err(Error::Checkpoint(format!(
            "{name}: bytes {start}..{end} lie outside the {}-byte blob",
            blob.len()
        )));
    }
    Ok(blob[start..end]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let version = value.get("format_version").and_then(|v| v.as_u64());
    if version != Some(FORMAT_VERSION as u64) {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version:?} (expected {FORMAT_VERSION})"
        )));
    }
    Ok(serde_json::from_value(value)?)
}

/// Rebuilds the model recorded in a checkpoint.
pub fn load(path: &Path) -> Result<Model> {
    let manifest = read_manifest(path)?;
    let mut model = Model::new(manifest.model.clone(), manifest.seed)?;
    restore(path, &manifest, &mut model)?;
    Ok(model)
}

/// Overwrites the parameters of an existing model; every parameter must be
/// present with the same shape.
pub fn load_into(path: &Path, model: &mut Model) -> Result<()> {
    let manifest = read_manifest(path)?;
    restore(path, &manifest, model)
}

fn restore(path: &Path, manifest: &Manifest, model: &mut Model) -> Result<()> {
    let bin = path
        .parent()
        .unwrap_or_else(|| Path::new(""))
        .join(&manifest.blob);
    let blob = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    if blob.len() as u64 != manifest.blob_bytes {
        return Err(Error::Checkpoint(format!(
            "blob has {} bytes, manifest expects {}",
            blob.len(),
            manifest.blob_bytes
        )));
    }
    if manifest.params.len() != model.params().len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} parameters, model has {}",
            manifest.params.len(),
            model.params().len()
        )));
    }
    for entry in &manifest.params {
        let p = model
            .params_mut()
            .by_name_mut(&entry.name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {}", entry.name)))?;
        if p.value.shape() != entry.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "{}: shape {:?} in checkpoint, {:?} in model",
                entry.name,
                entry.shape,
                p.value.shape()
            )));
        }
        let n = p.value.len();
        let shape = entry.shape.clone();
        p.value = Tensor::new(shape.clone(), read_f32(&blob, entry.value_offset, n, &entry.name)?)?;
        p.adam_m = Tensor::new(shape.clone(), read_f32(&blob, entry.adam_m_offset, n, &entry.name)?)?;
        p.adam_v = Tensor::new(shape, read_f32(&blob, entry.adam_v_offset, n, &entry.name)?)?;
    }
    model.set_step(manifest.adam_step);
    Ok(())
}
