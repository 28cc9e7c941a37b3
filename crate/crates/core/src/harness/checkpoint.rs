//! Single-file checkpoints: magic, manifest length, JSON manifest, then
//! little-endian `f64` blobs. Every blob carries a CRC32.

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"DVLCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Blob {
    pub offset: u64,
    pub len: u64,
    pub crc32: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub step_count: u64,
    pub value: Blob,
    pub adam_m: Blob,
    pub adam_v: Blob,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub model: ModelConfig,
    /// Optimization steps taken before saving.
    pub steps: u64,
    pub entries: Vec<Entry>,
}

fn push_blob(payload: &mut Vec<u8>, t: &Tensor) -> Blob {
    let offset = payload.len() as u64;
    for v in t.data() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    let bytes = &payload[offset as usize..];
    Blob {
        offset,
        len: bytes.len() as u64,
        crc32: crc32fast::hash(bytes),
    }
}

pub fn to_bytes(model: &Model, steps: u64) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    let mut entries = Vec::with_capacity(model.store.len());
    for p in model.store.iter() {
        entries.push(Entry {
            name: p.name.clone(),
            shape: p.tensor.shape().to_vec(),
            step_count: p.step_count,
            value: push_blob(&mut payload, &p.tensor),
            adam_m: push_blob(&mut payload, &p.adam_m),
            adam_v: push_blob(&mut payload, &p.adam_v),
        });
    }
    let manifest = serde_json::to_vec(&Manifest {
        version: VERSION,
        model: model.cfg,
        steps,
        entries,
    })?;
    let mut out = Vec::with_capacity(16 + manifest.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest);
    out.extend_from_slice(&payload);
    Ok(out)
}

fn truncated() -> Error {
    Error::Checkpoint("file is truncated".into())
}

fn read_blob(payload: &[u8], b: &Blob, shape: &[usize], what: &str) -> Result<Tensor> {
    let (start, len) = (b.offset as usize, b.len as usize);
    let bytes = payload.get(start..start.checked_add(len).ok_or_else(truncated)?).ok_or_else(truncated)?;
    if crc32fast::hash(bytes) != b.crc32 {
        return Err(Error::Checkpoint(format!("checksum mismatch in {what}")));
    }
    let data: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Tensor::new(shape.to_vec(), data).map_err(|_| Error::Checkpoint(format!("blob size does not match shape in {what}")))
}

/// Parses the header and manifest without touching the payload.
pub fn read_manifest(bytes: &[u8]) -> Result<(Manifest, &[u8])> {
    if bytes.len() < 16 {
        return Err(truncated());
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let end = 16usize.checked_add(mlen).ok_or_else(truncated)?;
    let raw = bytes.get(16..end).ok_or_else(truncated)?;
    #[derive(Deserialize)]
    struct Version {
        version: u32,
    }
    let v: Version = serde_json::from_slice(raw).map_err(|e| Error::Checkpoint(format!("bad manifest: {e}")))?;
    if v.version != VERSION {
        return Err(Error::VersionMismatch {
            found: v.version,
            expected: VERSION,
        });
    }
    let manifest: Manifest = serde_json::from_slice(raw).map_err(|e| Error::Checkpoint(format!("bad manifest: {e}")))?;
    Ok((manifest, &bytes[end..]))
}

/// Rebuilds the model and returns it with the saved step count.
pub fn from_bytes(bytes: &[u8]) -> Result<(Model, u64)> {
    let (manifest, payload) = read_manifest(bytes)?;
    let expected: u64 = manifest.entries.iter().map(|e| e.value.len + e.adam_m.len + e.adam_v.len).sum();
    if (payload.len() as u64) < expected {
        return Err(truncated());
    }
    let mut model = Model::new(manifest.model, 0, 0.0)?;
    if model.store.len() != manifest.entries.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} parameters, model expects {}",
            manifest.entries.len(),
            model.store.len()
        )));
    }
    for e in &manifest.entries {
        let p = model
            .store
            .by_name_mut(&e.name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {}", e.name)))?;
        if p.tensor.shape() != e.shape.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "checkpoint_load",
                lhs: e.shape.clone(),
                rhs: p.tensor.shape().to_vec(),
            });
        }
        p.tensor = read_blob(payload, &e.value, &e.shape, &e.name)?;
        p.adam_m = read_blob(payload, &e.adam_m, &e.shape, &e.name)?;
        p.adam_v = read_blob(payload, &e.adam_v, &e.shape, &e.name)?;
        p.step_count = e.step_count;
        p.grad = None;
    }
    Ok((model, manifest.steps))
}

pub fn save(model: &Model, steps: u64, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model, steps)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(Model, u64)> {
    from_bytes(&std::fs::read(path)?)
}
