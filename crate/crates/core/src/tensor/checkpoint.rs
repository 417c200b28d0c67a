//! Binary checkpoint file.
//!
//! Layout:
//! ```text
//! "SCGA-CKPT-1\n"
//! u64 LE   manifest length in bytes
//! manifest JSON: {"params": [{"name", "shape", "step"}...], "meta": {...}}
//! per parameter, in manifest order: value, first moment, second moment,
//! each as f64 LE
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};
use crate::{Error, Result};

pub const CHECKPOINT_HEADER: &[u8] = b"SCGA-CKPT-1\n";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub params: Vec<ManifestEntry>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

fn put_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(store: &ParamStore, meta: &serde_json::Value) -> Result<Vec<u8>> {
    let manifest = CheckpointManifest {
        params: store
            .iter()
            .map(|p| ManifestEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                step: p.step,
            })
            .collect(),
        meta: meta.clone(),
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut out =
        Vec::with_capacity(CHECKPOINT_HEADER.len() + 8 + json.len() + store.num_scalars() * 24);
    out.extend_from_slice(CHECKPOINT_HEADER);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in store.iter() {
        put_f64s(&mut out, p.value.data());
        put_f64s(&mut out, &p.first_moment);
        put_f64s(&mut out, &p.second_moment);
    }
    Ok(out)
}

pub fn write_checkpoint(path: &Path, store: &ParamStore, meta: &serde_json::Value) -> Result<()> {
    let bytes = encode_checkpoint(store, meta)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

fn read_manifest(cur: &mut Cursor) -> Result<CheckpointManifest> {
    if cur.take(CHECKPOINT_HEADER.len())? != CHECKPOINT_HEADER {
        return Err(Error::Checkpoint("missing SCGA-CKPT-1 header".into()));
    }
    let len = u64::from_le_bytes(cur.take(8)?.try_into().unwrap()) as usize;
    serde_json::from_slice(cur.take(len)?).map_err(|e| Error::Checkpoint(e.to_string()))
}

/// The metadata of a checkpoint, without touching any parameters.
pub fn checkpoint_meta(bytes: &[u8]) -> Result<serde_json::Value> {
    Ok(read_manifest(&mut Cursor { bytes, pos: 0 })?.meta)
}

/// Restores values and optimizer moments into `store`, whose parameter names
/// and shapes must match the file exactly. Returns the manifest metadata.
pub fn decode_checkpoint(bytes: &[u8], store: &mut ParamStore) -> Result<serde_json::Value> {
    let mut cur = Cursor { bytes, pos: 0 };
    let manifest = read_manifest(&mut cur)?;
    if manifest.params.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} parameters, model has {}",
            manifest.params.len(),
            store.len()
        )));
    }
    for entry in &manifest.params {
        let id = store
            .id(&entry.name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {}", entry.name)))?;
        let p = store.get_mut(id);
        if p.value.shape() != entry.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "parameter {} has shape {:?} in file, {:?} in model",
                entry.name,
                entry.shape,
                p.value.shape()
            )));
        }
        let n = p.value.len();
        p.value = Tensor::new(entry.shape.clone(), cur.f64s(n)?)?;
        p.first_moment = cur.f64s(n)?;
        p.second_moment = cur.f64s(n)?;
        p.step = entry.step;
        p.grad = None;
    }
    if cur.pos != bytes.len() {
        return Err(Error::Checkpoint(
            "trailing bytes after parameter data".into(),
        ));
    }
    Ok(manifest.meta)
}

pub fn read_checkpoint(path: &Path, store: &mut ParamStore) -> Result<serde_json::Value> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, store)
}
