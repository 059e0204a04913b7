//! Single-file container of named `f64` matrices plus a JSON metadata record.
//!
//! Layout: 8-byte magic, little-endian `u64` header length, a JSON header
//! `{"metadata": …, "arrays": [{"name", "rows", "cols"}, …]}`, then the raw
//! little-endian values of each array in header order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"AGARCH01";

#[derive(Debug, Clone, PartialEq)]
pub struct Archive {
    pub metadata: serde_json::Value,
    pub arrays: BTreeMap<String, Array2<f64>>,
}

#[derive(Serialize, Deserialize)]
struct ArrayHeader {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    metadata: serde_json::Value,
    arrays: Vec<ArrayHeader>,
}

impl Archive {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            metadata: self.metadata.clone(),
            arrays: self
                .arrays
                .iter()
                .map(|(name, a)| ArrayHeader {
                    name: name.clone(),
                    rows: a.nrows(),
                    cols: a.ncols(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("archive header serializes");
        let total: usize = self.arrays.values().map(|a| a.len() * 8).sum();
        let mut out = Vec::with_capacity(16 + json.len() + total);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for a in self.arrays.values() {
            for v in a.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Checkpoint(msg.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not an archive (bad magic)"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(16..16 + len)
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body)
            .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        let mut offset = 16 + len;
        let mut arrays = BTreeMap::new();
        for a in header.arrays {
            let n = a.rows * a.cols;
            let raw = bytes
                .get(offset..offset + 8 * n)
                .ok_or_else(|| Error::Checkpoint(format!("truncated data for `{}`", a.name)))?;
            let values: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            offset += 8 * n;
            let arr = Array2::from_shape_vec((a.rows, a.cols), values).expect("sized above");
            if arrays.insert(a.name.clone(), arr).is_some() {
                return Err(Error::Checkpoint(format!("duplicate array `{}`", a.name)));
            }
        }
        if offset != bytes.len() {
            return Err(bad("trailing bytes after array data"));
        }
        Ok(Self {
            metadata: header.metadata,
            arrays,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
