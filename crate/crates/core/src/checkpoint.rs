//! Parameter checkpoints: a JSON manifest (`<base>.json`) naming every tensor
//! with its shape and offset, plus a raw little-endian `f64` blob
//! (`<base>.bin`) whose SHA-256 is recorded in the manifest.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agent::{ModelConfig, ModelParams};
use crate::error::{Error, IoContext, Result};

pub const FORMAT_VERSION: u32 = 1;

/// Optimizer and target-network state needed to resume training exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub target: ModelParams,
    pub target_version: u64,
    pub adam_m: ModelParams,
    pub adam_v: ModelParams,
    pub adam_t: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub config_hash: String,
    pub step: u64,
    pub train_state: Option<TrainState>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub model_config: ModelConfig,
    pub config_hash: String,
    pub step: u64,
    pub target_version: Option<u64>,
    pub adam_t: Option<u64>,
    pub tensors: Vec<TensorEntry>,
    pub total_values: usize,
    pub sha256: String,
}

pub fn manifest_path(base: &Path) -> PathBuf {
    base.with_extension("json")
}

pub fn blob_path(base: &Path) -> PathBuf {
    base.with_extension("bin")
}

const GROUPS: [&str; 4] = ["", "target/", "adam_m/", "adam_v/"];

fn groups(ckpt: &Checkpoint) -> Vec<(&'static str, &ModelParams)> {
    let mut out = vec![(GROUPS[0], &ckpt.params)];
    if let Some(ts) = &ckpt.train_state {
        out.push((GROUPS[1], &ts.target));
        out.push((GROUPS[2], &ts.adam_m));
        out.push((GROUPS[3], &ts.adam_v));
    }
    out
}

pub fn save_checkpoint(ckpt: &Checkpoint, base: &Path) -> Result<()> {
    if let Some(dir) = base.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).at(dir)?;
    }
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    let mut offset = 0;
    for (prefix, params) in groups(ckpt) {
        for (name, t) in params.tensor_names().into_iter().zip(params.tensors()) {
            tensors.push(TensorEntry {
                name: format!("{prefix}{name}"),
                shape: [t.nrows(), t.ncols()],
                offset,
            });
            for v in t.iter() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            offset += t.len();
        }
    }
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        model_config: ckpt.params.config.clone(),
        config_hash: ckpt.config_hash.clone(),
        step: ckpt.step,
        target_version: ckpt.train_state.as_ref().map(|t| t.target_version),
        adam_t: ckpt.train_state.as_ref().map(|t| t.adam_t),
        tensors,
        total_values: offset,
        sha256: hex::encode(Sha256::digest(&blob)),
    };
    let bpath = blob_path(base);
    std::fs::write(&bpath, &blob).at(&bpath)?;
    let mpath = manifest_path(base);
    std::fs::write(&mpath, serde_json::to_string_pretty(&manifest)? + "\n").at(&mpath)?;
    Ok(())
}

pub fn load_manifest(base: &Path) -> Result<CheckpointManifest> {
    let mpath = manifest_path(base);
    let text = std::fs::read_to_string(&mpath).at(&mpath)?;
    let manifest: CheckpointManifest = serde_json::from_str(&text).map_err(|e| Error::Corrupt {
        path: mpath.clone(),
        reason: e.to_string(),
    })?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::SchemaVersion {
            expected: FORMAT_VERSION,
            found: manifest.format_version,
        });
    }
    Ok(manifest)
}

pub fn load_checkpoint(base: &Path) -> Result<Checkpoint> {
    let manifest = load_manifest(base)?;
    let bpath = blob_path(base);
    let blob = std::fs::read(&bpath).at(&bpath)?;
    let corrupt = |reason: String| Error::Corrupt {
        path: bpath.clone(),
        reason,
    };
    if blob.len() != manifest.total_values * 8 {
        return Err(corrupt(format!(
            "expected {} bytes, found {}",
            manifest.total_values * 8,
            blob.len()
        )));
    }
    if hex::encode(Sha256::digest(&blob)) != manifest.sha256 {
        return Err(corrupt("checksum mismatch".into()));
    }
    let values: Vec<f64> = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();

    let template = ModelParams::new(
        manifest.model_config.clone(),
        &mut ChaCha8Rng::seed_from_u64(0),
    )?;
    let has_state = manifest.adam_t.is_some();
    let mut entries = manifest.tensors.iter();
    let mut read_group = |prefix: &str| -> Result<ModelParams> {
        let mut params = template.clone();
        for (name, t) in template
            .tensor_names()
            .into_iter()
            .zip(params.tensors_mut())
        {
            let full = format!("{prefix}{name}");
            let entry = entries
                .next()
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {full}")))?;
            if entry.name != full {
                return Err(Error::Checkpoint(format!(
                    "expected tensor {full}, found {}",
                    entry.name
                )));
            }
            if entry.shape != [t.nrows(), t.ncols()] {
                return Err(Error::Checkpoint(format!(
                    "tensor {full} has shape {:?}, model expects {:?}",
                    entry.shape,
                    [t.nrows(), t.ncols()]
                )));
            }
            let end = entry.offset + t.len();
            if end > values.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor {full} runs past the blob"
                )));
            }
            *t = Array2::from_shape_vec(t.raw_dim(), values[entry.offset..end].to_vec())
                .expect("shape checked above");
        }
        Ok(params)
    };
    let params = read_group(GROUPS[0])?;
    let train_state = if has_state {
        Some(TrainState {
            target: read_group(GROUPS[1])?,
            target_version: manifest.target_version.unwrap_or(0),
            adam_m: read_group(GROUPS[2])?,
            adam_v: read_group(GROUPS[3])?,
            adam_t: manifest.adam_t.unwrap_or(0),
        })
    } else {
        None
    };
    if entries.next().is_some() {
        return Err(Error::Checkpoint(
            "manifest lists unexpected extra tensors".into(),
        ));
    }
    Ok(Checkpoint {
        params,
        config_hash: manifest.config_hash,
        step: manifest.step,
        train_state,
    })
}

/// Loads a checkpoint and rejects it unless its network shape equals `expected`.
pub fn load_checkpoint_for(base: &Path, expected: &ModelConfig) -> Result<Checkpoint> {
    let manifest = load_manifest(base)?;
    check_compatible(&manifest.model_config, expected)?;
    load_checkpoint(base)
}

pub fn check_compatible(found: &ModelConfig, expected: &ModelConfig) -> Result<()> {
    if found.slots != expected.slots {
        return Err(Error::SlotCountMismatch {
            expected: expected.slots,
            got: found.slots,
        });
    }
    if found != expected {
        return Err(Error::Checkpoint(format!(
            "network shape differs: checkpoint {found:?}, expected {expected:?}"
        )));
    }
    Ok(())
}
