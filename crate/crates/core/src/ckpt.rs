//! Parameter checkpoints: a single file with a JSON index mapping parameter
//! path → shape → location, followed by raw little-endian f64 payload.
//! Round-trips are bit-exact.
//!
//! Layout: 8-byte magic, u32 LE version, u32 LE index length, index JSON,
//! payload bytes.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::layers::{Param, ParamKind};
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const CKPT_MAGIC: [u8; 8] = *b"FGATCKPT";
pub const CKPT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct IndexEntry {
    path: String,
    kind: ParamKind,
    shape: Vec<usize>,
    /// Offset into the payload, in f64 units.
    offset: usize,
    len: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Index {
    meta: serde_json::Value,
    params: Vec<IndexEntry>,
}

/// Write parameters in the given order with an arbitrary JSON `meta` blob
/// (the model configuration, typically).
pub fn save(path: &Path, meta: &serde_json::Value, params: &[&Param]) -> Result<()> {
    let mut entries = Vec::with_capacity(params.len());
    let mut offset = 0usize;
    for p in params {
        entries.push(IndexEntry {
            path: p.path.clone(),
            kind: p.kind,
            shape: p.value.shape().to_vec(),
            offset,
            len: p.numel(),
        });
        offset += p.numel();
    }
    let index = Index { meta: meta.clone(), params: entries };
    let index_bytes = serde_json::to_vec(&index)?;

    let mut file = File::create(path)?;
    file.write_all(&CKPT_MAGIC)?;
    file.write_all(&CKPT_VERSION.to_le_bytes())?;
    file.write_all(&(index_bytes.len() as u32).to_le_bytes())?;
    file.write_all(&index_bytes)?;
    for p in params {
        for v in p.value.data() {
            file.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Read a checkpoint back; returns the meta blob and the parameters in
/// stored order.
pub fn load(path: &Path) -> Result<(serde_json::Value, Vec<Param>)> {
    let mut file = File::open(path)?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;

    let fail = |msg: &str| Error::Checkpoint(format!("{}: {msg}", path.display()));
    if bytes.len() < 16 || bytes[..8] != CKPT_MAGIC {
        return Err(fail("bad magic, not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CKPT_VERSION {
        return Err(fail(&format!("unsupported version {version}")));
    }
    let index_len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + index_len {
        return Err(fail("truncated index"));
    }
    let index: Index = serde_json::from_slice(&bytes[16..16 + index_len])
        .map_err(|e| fail(&format!("corrupt index: {e}")))?;

    let payload = &bytes[16 + index_len..];
    let total: usize = index.params.iter().map(|e| e.len).sum();
    if payload.len() != total * 8 {
        return Err(fail(&format!(
            "payload holds {} bytes, index promises {}",
            payload.len(),
            total * 8
        )));
    }

    let mut params = Vec::with_capacity(index.params.len());
    for entry in index.params {
        let numel: usize = entry.shape.iter().product();
        if numel != entry.len {
            return Err(fail(&format!("entry {} has inconsistent shape", entry.path)));
        }
        let start = entry.offset * 8;
        let mut data = Vec::with_capacity(entry.len);
        for i in 0..entry.len {
            let b: [u8; 8] = payload[start + i * 8..start + (i + 1) * 8].try_into().unwrap();
            data.push(f64::from_le_bytes(b));
        }
        params.push(Param {
            path: entry.path,
            kind: entry.kind,
            value: Tensor::new(entry.shape, data)
                .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?,
        });
    }
    Ok((index.meta, params))
}
