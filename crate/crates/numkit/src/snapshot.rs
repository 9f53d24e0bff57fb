//! Tensor snapshots: a JSON manifest of `(name, shape, dtype, offset)`
//! entries plus one flat little-endian `f64` blob.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{NumError, Result};
use crate::tensor::Tensor;

pub const DTYPE_F64: &str = "f64";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SnapshotEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the blob.
    pub offset: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SnapshotManifest {
    pub entries: Vec<SnapshotEntry>,
}

pub fn encode_snapshot<'a, I>(tensors: I) -> (SnapshotManifest, Vec<u8>)
where
    I: IntoIterator<Item = (&'a str, &'a Tensor)>,
{
    let mut manifest = SnapshotManifest::default();
    let mut blob = Vec::new();
    for (name, t) in tensors {
        manifest.entries.push(SnapshotEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            dtype: DTYPE_F64.to_string(),
            offset: blob.len(),
        });
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    (manifest, blob)
}

pub fn decode_snapshot(manifest: &SnapshotManifest, blob: &[u8]) -> Result<Vec<(String, Tensor)>> {
    manifest
        .entries
        .iter()
        .map(|e| {
            if e.dtype != DTYPE_F64 {
                return Err(NumError::Format(format!("{}: unsupported dtype {}", e.name, e.dtype)));
            }
            let count: usize = e.shape.iter().product();
            let end = e.offset + count * 8;
            let bytes = blob.get(e.offset..end).ok_or_else(|| {
                NumError::Format(format!("{}: blob too short ({} < {end})", e.name, blob.len()))
            })?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            Ok((e.name.clone(), Tensor::new(e.shape.clone(), data)?))
        })
        .collect()
}

/// Writes `<stem>.json` (manifest) and `<stem>.bin` (blob).
pub fn write_snapshot<'a, I>(stem: &Path, tensors: I) -> Result<SnapshotManifest>
where
    I: IntoIterator<Item = (&'a str, &'a Tensor)>,
{
    let (manifest, blob) = encode_snapshot(tensors);
    fs::write(stem.with_extension("bin"), blob)?;
    fs::write(stem.with_extension("json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_snapshot(stem: &Path) -> Result<Vec<(String, Tensor)>> {
    let manifest: SnapshotManifest = serde_json::from_slice(&fs::read(stem.with_extension("json"))?)?;
    let blob = fs::read(stem.with_extension("bin"))?;
    decode_snapshot(&manifest, &blob)
}
