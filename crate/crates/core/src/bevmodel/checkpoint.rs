//! Checkpoint container.
//!
//! ```text
//! magic "MBCK" | u32 version | u64 header length | header JSON | f64 payload
//! ```
//!
//! The header holds caller metadata plus a tensor table
//! (`name`, `rows`, `cols`, element `offset` into the payload). Values are
//! stored as little-endian f64 so f32 and f64 models round-trip exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::synthscene::atomic_write;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MBCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor<f64>)>,
}

/// FNV-1a over a canonical string (e.g. a config serialized to JSON).
pub fn config_hash(canonical: &str) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in canonical.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor<f64>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Tensors whose name starts with `prefix`, with the prefix stripped.
    pub fn with_prefix(&self, prefix: &str) -> Vec<(String, Tensor<f64>)> {
        self.tensors
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let entries = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let e = TensorEntry {
                    name: name.clone(),
                    rows: t.rows(),
                    cols: t.cols(),
                    offset,
                };
                offset += t.len();
                e
            })
            .collect();
        let header = serde_json::to_vec(&Header {
            meta: self.meta.clone(),
            tensors: entries,
        })?;
        let mut buf = Vec::with_capacity(16 + header.len() + 8 * offset);
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
        buf.extend_from_slice(&header);
        for (_, t) in &self.tensors {
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(buf)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|d| Error::format(path, d))
    }

    fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < 16 || &bytes[0..4] != CHECKPOINT_MAGIC {
            return Err("missing MBCK magic".into());
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(format!("unsupported checkpoint version {version}"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let payload_start = 16usize.checked_add(hlen).ok_or("header length overflow")?;
        if bytes.len() < payload_start {
            return Err("truncated header".into());
        }
        let header: Header = serde_json::from_slice(&bytes[16..payload_start]).map_err(|e| e.to_string())?;
        let payload = &bytes[payload_start..];
        if payload.len() % 8 != 0 {
            return Err("payload is not a whole number of f64 values".into());
        }
        let values: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let n = e.rows * e.cols;
            let end = e.offset.checked_add(n).ok_or("tensor offset overflow")?;
            if end > values.len() {
                return Err(format!("tensor {} runs past the payload", e.name));
            }
            tensors.push((e.name, Tensor::from_vec(e.rows, e.cols, values[e.offset..end].to_vec())));
        }
        Ok(Self {
            meta: header.meta,
            tensors,
        })
    }
}
