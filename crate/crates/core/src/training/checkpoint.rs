//! Parameter checkpoints: a `manifest.json` describing every tensor plus a
//! flat little-endian `f64` blob in `params.bin`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{build_model, Forecaster, ModelConfig, ParamSet};

pub const FORMAT_VERSION: u32 = 1;
pub const DTYPE: &str = "f64-le";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "params.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub dtype: String,
    pub config: ModelConfig,
    pub params: Vec<ParamEntry>,
    pub total_bytes: usize,
}

/// Writes the model's parameters and configuration into directory `dir`.
pub fn save_checkpoint(model: &dyn Forecaster, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = Vec::with_capacity(model.params().num_values() * 8);
    let mut entries = Vec::with_capacity(model.params().len());
    for (name, t) in model.params().iter() {
        entries.push(ParamEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset: blob.len(),
        });
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        dtype: DTYPE.into(),
        config: model.config().clone(),
        params: entries,
        total_bytes: blob.len(),
    };
    let mpath = dir.join(MANIFEST_FILE);
    fs::write(&mpath, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&mpath, e))?;
    let bpath = dir.join(BLOB_FILE);
    fs::write(&bpath, blob).map_err(|e| Error::io(&bpath, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", mpath.display())))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "format version {} (supported: {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    if manifest.dtype != DTYPE {
        return Err(Error::Format(format!("dtype {:?} (supported: {DTYPE:?})", manifest.dtype)));
    }
    Ok(manifest)
}

/// Rebuilds the model recorded in `dir` and loads its parameters.
pub fn load_checkpoint(dir: &Path) -> Result<Box<dyn Forecaster>> {
    let manifest = read_manifest(dir)?;
    let mut model = build_model(&manifest.config, 0)?;
    fill_params(model.params_mut(), &manifest, dir)?;
    Ok(model)
}

fn fill_params(params: &mut ParamSet, manifest: &Manifest, dir: &Path) -> Result<()> {
    if manifest.params.len() != params.len() {
        return Err(Error::shape(format!(
            "checkpoint has {} parameters, configuration needs {}",
            manifest.params.len(),
            params.len()
        )));
    }
    for (entry, (name, t)) in manifest.params.iter().zip(params.iter()) {
        if entry.name != name || entry.shape != t.shape() {
            return Err(Error::shape(format!(
                "checkpoint parameter {} {:?} does not match {} {:?}",
                entry.name,
                entry.shape,
                name,
                t.shape()
            )));
        }
    }
    let bpath = dir.join(BLOB_FILE);
    let blob = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
    if blob.len() != manifest.total_bytes || blob.len() != params.num_values() * 8 {
        return Err(Error::Format(format!(
            "blob holds {} bytes, manifest declares {} and parameters need {}",
            blob.len(),
            manifest.total_bytes,
            params.num_values() * 8
        )));
    }
    for (entry, t) in manifest.params.iter().zip(params.tensors_mut()) {
        let end = entry.offset + t.len() * 8;
        let bytes = blob
            .get(entry.offset..end)
            .ok_or_else(|| Error::Format(format!("parameter {} lies outside the blob", entry.name)))?;
        for (dst, chunk) in t.data_mut().iter_mut().zip(bytes.chunks_exact(8)) {
            *dst = f64::from_le_bytes(chunk.try_into().expect("chunks of eight bytes"));
        }
    }
    Ok(())
}
