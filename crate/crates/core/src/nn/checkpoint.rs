//! Self-describing checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes  "RKDCKPT\x01"
//! hlen    u64      length of the JSON header
//! header  hlen     {"kind", "meta", "vocab", "tensors": [{"name", "shape"}]}
//! data             f64 LE values of each tensor, row-major, in header order
//! ```

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::params::{Mat, ParamStore};
use crate::error::{Error, Result};
use crate::text::Vocabulary;

const MAGIC: &[u8; 8] = b"RKDCKPT\x01";

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    vocab: Vocabulary,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: serde_json::Value,
    pub vocab: Vocabulary,
    pub tensors: Vec<(String, Mat)>,
}

impl Checkpoint {
    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::KindMismatch {
                expected: kind.to_string(),
                found: self.kind.clone(),
            });
        }
        Ok(())
    }

    /// Copy every tensor into `store`; names and shapes must match exactly.
    pub fn load_into(&self, store: &mut ParamStore) -> Result<()> {
        if self.tensors.len() != store.len() {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint holds {} tensors, model expects {}",
                self.tensors.len(),
                store.len()
            )));
        }
        for (name, value) in &self.tensors {
            let id = store
                .id(name)
                .ok_or_else(|| Error::ConfigMismatch(format!("unknown tensor `{name}`")))?;
            if store.get(id).dim() != value.dim() {
                return Err(Error::ConfigMismatch(format!(
                    "tensor `{name}` has shape {:?}, model expects {:?}",
                    value.dim(),
                    store.get(id).dim()
                )));
            }
            store.set(id, value.clone());
        }
        Ok(())
    }
}

pub fn encode_checkpoint(
    kind: &str,
    meta: serde_json::Value,
    vocab: &Vocabulary,
    store: &ParamStore,
) -> Result<Vec<u8>> {
    let header = Header {
        kind: kind.to_string(),
        meta,
        vocab: vocab.clone(),
        tensors: store
            .iter()
            .map(|(_, name, v)| TensorEntry {
                name: name.to_string(),
                shape: [v.nrows(), v.ncols()],
            })
            .collect(),
    };
    let header = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + header.len() + store.num_scalars() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, _, v) in store.iter() {
        for x in v.iter() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let corrupt = |offset: usize, detail: String| Error::CorruptCheckpoint {
        offset: offset as u64,
        detail,
    };
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(corrupt(0, "missing checkpoint magic".into()));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let hend = 16usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| corrupt(8, format!("header length {hlen} exceeds file size {}", bytes.len())))?;
    let header: Header = serde_json::from_slice(&bytes[16..hend])
        .map_err(|e| corrupt(16 + e.column(), format!("bad header: {e}")))?;
    let mut offset = hend;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for t in header.tensors {
        let [r, c] = t.shape;
        let need = r * c * 8;
        if offset + need > bytes.len() {
            return Err(corrupt(
                offset,
                format!("tensor `{}` needs {need} bytes, {} remain", t.name, bytes.len() - offset),
            ));
        }
        let data: Vec<f64> = bytes[offset..offset + need]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        offset += need;
        let m = Array2::from_shape_vec((r, c), data).expect("shape matches length");
        tensors.push((t.name, m));
    }
    if offset != bytes.len() {
        return Err(corrupt(offset, format!("{} trailing bytes", bytes.len() - offset)));
    }
    Ok(Checkpoint {
        kind: header.kind,
        meta: header.meta,
        vocab: header.vocab,
        tensors,
    })
}

pub fn write_checkpoint(
    path: &Path,
    kind: &str,
    meta: serde_json::Value,
    vocab: &Vocabulary,
    store: &ParamStore,
) -> Result<()> {
    let bytes = encode_checkpoint(kind, meta, vocab, store)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Kind tag of a checkpoint without decoding its tensors.
pub fn peek_kind(path: &Path) -> Result<String> {
    Ok(read_checkpoint(path)?.kind)
}
