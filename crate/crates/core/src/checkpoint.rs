//! Versioned JSON checkpoints: named parameter blobs plus the
//! architecture-config digest, verified on load.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::IxDyn;
use serde::{Deserialize, Serialize};

use crate::config::ArchConfig;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Arr;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Blob {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    arch_digest: String,
    stage: String,
    params: BTreeMap<String, Blob>,
}

pub fn save_checkpoint(path: &Path, arch: &ArchConfig, stage: &str, store: &ParamStore) -> Result<()> {
    let params = store
        .iter()
        .map(|(name, value)| {
            (
                name.to_string(),
                Blob { shape: value.shape().to_vec(), data: value.iter().copied().collect() },
            )
        })
        .collect();
    let file = CheckpointFile {
        version: CHECKPOINT_VERSION,
        arch_digest: arch.digest(),
        stage: stage.to_string(),
        params,
    };
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string(&file)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Load a checkpoint, verifying version and architecture digest. Returns
/// the stage tag and the parameter store.
pub fn load_checkpoint(path: &Path, arch: &ArchConfig) -> Result<(String, ParamStore)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: CheckpointFile =
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("parse failure: {e}")))?;
    if file.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "version {} unsupported (expected {CHECKPOINT_VERSION})",
            file.version
        )));
    }
    if file.arch_digest != arch.digest() {
        return Err(Error::Checkpoint(
            "architecture digest mismatch: checkpoint was written with a different config".to_string(),
        ));
    }
    let mut store = ParamStore::new();
    for (name, blob) in file.params {
        let n: usize = blob.shape.iter().product();
        if n != blob.data.len() {
            return Err(Error::Checkpoint(format!("blob '{name}' shape/data length mismatch")));
        }
        let arr = Arr::from_shape_vec(IxDyn(&blob.shape), blob.data)
            .map_err(|e| Error::Checkpoint(format!("blob '{name}': {e}")))?;
        store.insert(&name, arr);
    }
    Ok((file.stage, store))
}
