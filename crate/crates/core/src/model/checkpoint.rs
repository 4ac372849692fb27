//! Checkpoints: concatenated DVT1 records plus a JSON manifest.
//!
//! `save(path, ..)` writes the records to `path` and the manifest next to it
//! with a `.json` extension. Values are stored as f32, like every DVT1 file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::params::ParamStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub config_hash: String,
    pub tensors: Vec<ManifestEntry>,
}

/// Hex SHA-256 of a canonical serialisation of the configuration.
pub fn config_hash<T: Serialize>(cfg: &T) -> Result<String> {
    let bytes = serde_json::to_vec(cfg)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

pub fn manifest_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn save(path: &Path, store: &ParamStore, config_hash: &str) -> Result<Manifest> {
    let mut blob = Vec::new();
    let mut tensors = Vec::with_capacity(store.len());
    for (name, t) in store.iter() {
        let rec = t.to_dvt1_bytes();
        tensors.push(ManifestEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset: blob.len() as u64,
            bytes: rec.len() as u64,
        });
        blob.extend_from_slice(&rec);
    }
    let manifest = Manifest {
        format: "DVT1".into(),
        config_hash: config_hash.to_string(),
        tensors,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, blob)?;
    fs::write(manifest_path(path), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Load a checkpoint; when `expect_hash` is given the manifest must match it.
pub fn load(path: &Path, expect_hash: Option<&str>) -> Result<ParamStore> {
    let fmt = |detail: String| Error::Format {
        path: path.to_path_buf(),
        detail,
    };
    let manifest: Manifest = serde_json::from_slice(&fs::read(manifest_path(path))?)?;
    if manifest.format != "DVT1" {
        return Err(fmt(format!("unknown format {:?}", manifest.format)));
    }
    if let Some(h) = expect_hash {
        if h != manifest.config_hash {
            return Err(fmt(format!("config hash {} does not match {h}", manifest.config_hash)));
        }
    }
    let blob = fs::read(path)?;
    let mut store = ParamStore::new();
    for e in &manifest.tensors {
        let (start, end) = (e.offset as usize, (e.offset + e.bytes) as usize);
        let rec = blob.get(start..end).ok_or_else(|| fmt(format!("{} lies outside the file", e.name)))?;
        let t = Tensor::read_dvt1(rec)?;
        if t.shape() != e.shape.as_slice() {
            return Err(fmt(format!("{} has shape {:?}, manifest says {:?}", e.name, t.shape(), e.shape)));
        }
        store.insert(e.name.clone(), t);
    }
    Ok(store)
}
