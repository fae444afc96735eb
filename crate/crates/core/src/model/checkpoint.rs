//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       8     magic  b"NDTCKPT\0"
//! 8       4     format version (u32)
//! 12      8     header length H in bytes (u64)
//! 20      H     UTF-8 JSON header: { version, config, vocab_fingerprint,
//!               tensors: [{ name, shape, group }] }
//! 20+H    ...   tensor data, f64 little-endian, in header order
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ClassifierModel, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::ParamGroup;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"NDTCKPT\0";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    group: ParamGroup,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    version: u32,
    config: ModelConfig,
    vocab_fingerprint: Option<String>,
    tensors: Vec<TensorEntry>,
}

/// A model together with the fingerprint of the vocabulary it was trained on.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: ClassifierModel,
    pub vocab_fingerprint: Option<String>,
}

pub fn save_checkpoint(path: &Path, model: &ClassifierModel, vocab_fingerprint: Option<&str>) -> Result<()> {
    let header = Header {
        version: CHECKPOINT_VERSION,
        config: model.config.clone(),
        vocab_fingerprint: vocab_fingerprint.map(str::to_owned),
        tensors: model
            .params
            .iter()
            .map(|(_, p)| TensorEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                group: p.group,
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(20 + json.len() + 8 * model.params.numel());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, p) in model.params.iter() {
        for v in p.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let bad = |m: &str| Error::Checkpoint(m.to_owned());
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body)?;
    let mut model = ClassifierModel::uninitialized(header.config)?;
    if model.params.len() != header.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "config implies {} tensors, file lists {}",
            model.params.len(),
            header.tensors.len()
        )));
    }
    let mut offset = 20 + hlen;
    let ids: Vec<_> = model.params.ids().collect();
    for (id, entry) in ids.into_iter().zip(&header.tensors) {
        let p = model.params.get(id);
        if p.name != entry.name || p.value.shape() != entry.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "tensor {} {:?} does not match expected {} {:?}",
                entry.name,
                entry.shape,
                p.name,
                p.value.shape()
            )));
        }
        let n = p.value.numel();
        let raw = bytes
            .get(offset..offset + 8 * n)
            .ok_or_else(|| Error::Checkpoint(format!("truncated data for {}", entry.name)))?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        model.params.set(id, &data)?;
        offset += 8 * n;
    }
    if offset != bytes.len() {
        return Err(bad("trailing bytes after tensor data"));
    }
    Ok(Checkpoint {
        model,
        vocab_fingerprint: header.vocab_fingerprint,
    })
}
