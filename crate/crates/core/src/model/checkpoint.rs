use std::fs;
use std::path::Path;

use numkit::snapshot::{decode_snapshot, encode_snapshot, SnapshotManifest};
use serde::{Deserialize, Serialize};

use super::{build_params, Model, ModelConfig};
use crate::error::{QgError, Result};

pub const CHECKPOINT_FORMAT: &str = "hopqg-checkpoint/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub config: ModelConfig,
    pub vocab_hash: String,
    pub step: u64,
    pub tensors: SnapshotManifest,
}

/// Writes `<stem>.json` and `<stem>.bin`.
pub fn save_checkpoint(model: &Model, vocab_hash: &str, step: u64, stem: &Path) -> Result<()> {
    let (tensors, blob) = encode_snapshot(model.params.named());
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        config: model.config.clone(),
        vocab_hash: vocab_hash.into(),
        step,
        tensors,
    };
    if let Some(dir) = stem.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(stem.with_extension("bin"), blob)?;
    fs::write(stem.with_extension("json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

/// Loads a checkpoint; with `vocab_hash` set, refuses one trained on a
/// different vocabulary.
pub fn load_checkpoint(stem: &Path, vocab_hash: Option<&str>) -> Result<(Model, CheckpointManifest)> {
    let manifest: CheckpointManifest =
        serde_json::from_slice(&fs::read(stem.with_extension("json"))?)?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(QgError::Checkpoint(format!(
            "unknown format {:?}",
            manifest.format
        )));
    }
    if let Some(expected) = vocab_hash {
        if expected != manifest.vocab_hash {
            return Err(QgError::Checkpoint(format!(
                "vocabulary hash {} does not match checkpoint {}",
                expected, manifest.vocab_hash
            )));
        }
    }
    manifest.config.validate()?;
    let blob = fs::read(stem.with_extension("bin"))?;
    let tensors = decode_snapshot(&manifest.tensors, &blob)?;
    let (layout, mut params) = build_params(&manifest.config, 0);
    if tensors.len() != params.len() {
        return Err(QgError::Checkpoint(format!(
            "{} tensors stored, configuration needs {}",
            tensors.len(),
            params.len()
        )));
    }
    for (i, (name, t)) in tensors.into_iter().enumerate() {
        if name != params.names()[i] || t.shape() != params.get(i).shape() {
            return Err(QgError::Checkpoint(format!(
                "tensor {i} is {name} {:?}, expected {} {:?}",
                t.shape(),
                params.names()[i],
                params.get(i).shape()
            )));
        }
        params.replace(i, t);
    }
    let model = Model {
        config: manifest.config.clone(),
        layout,
        params,
    };
    Ok((model, manifest))
}
