//! Binary checkpoint container.
//!
//! Layout: the 7-byte magic `ASDKIT1`, a little-endian `u64` byte length,
//! that many bytes of JSON metadata, then every array's raw little-endian
//! values in metadata order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{DiffError, Result};
use crate::params::ParamStore;
use crate::tensor::{DType, Real, Tensor};

pub const MAGIC: &[u8; 7] = b"ASDKIT1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryMeta {
    pub name: String,
    pub shape: Vec<usize>,
    pub frozen: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Metadata {
    dtype: DType,
    step: u64,
    entries: Vec<EntryMeta>,
    #[serde(default)]
    attrs: serde_json::Map<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub tensor: Tensor<f64>,
    pub frozen: bool,
}

/// In-memory checkpoint. Values are held as `f64` and narrowed to `dtype`
/// on write, so `f32` data round-trips exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub dtype: DType,
    pub step: u64,
    pub entries: Vec<Entry>,
    pub attrs: serde_json::Map<String, serde_json::Value>,
}

impl Checkpoint {
    pub fn new(dtype: DType) -> Self {
        Self {
            dtype,
            step: 0,
            entries: Vec::new(),
            attrs: serde_json::Map::new(),
        }
    }

    pub fn from_store<T: Real>(store: &ParamStore<T>, step: u64) -> Self {
        let mut ck = Self::new(T::DTYPE);
        ck.step = step;
        for (name, t) in store.iter() {
            ck.push(name, t.cast(), store.is_frozen(name));
        }
        ck
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<f64>, frozen: bool) {
        self.entries.push(Entry {
            name: name.into(),
            tensor,
            frozen,
        });
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Entries whose name starts with `prefix`.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a Entry> + 'a {
        self.entries.iter().filter(move |e| e.name.starts_with(prefix))
    }

    /// Builds a parameter store from every entry accepted by `keep`.
    pub fn to_store<T: Real>(&self, keep: impl Fn(&str) -> bool) -> Result<ParamStore<T>> {
        let mut store = ParamStore::new();
        for e in self.entries.iter().filter(|e| keep(&e.name)) {
            store.insert(e.name.clone(), e.tensor.cast())?;
            if e.frozen {
                store.freeze(&e.name)?;
            }
        }
        Ok(store)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = Metadata {
            dtype: self.dtype,
            step: self.step,
            entries: self
                .entries
                .iter()
                .map(|e| EntryMeta {
                    name: e.name.clone(),
                    shape: e.tensor.shape().to_vec(),
                    frozen: e.frozen,
                })
                .collect(),
            attrs: self.attrs.clone(),
        };
        let json = serde_json::to_vec(&meta)?;
        let payload: usize = self.entries.iter().map(|e| e.tensor.numel()).sum();
        let mut out = Vec::with_capacity(15 + json.len() + payload * self.dtype.size_of());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for e in &self.entries {
            for &v in e.tensor.data() {
                match self.dtype {
                    DType::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                    DType::F64 => out.extend_from_slice(&v.to_le_bytes()),
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| DiffError::Checkpoint(msg.to_string());
        if bytes.len() < 15 || &bytes[..7] != MAGIC {
            return Err(bad("missing ASDKIT1 magic"));
        }
        let len = u64::from_le_bytes(bytes[7..15].try_into().unwrap()) as usize;
        let body = bytes.get(15..15 + len).ok_or_else(|| bad("truncated metadata"))?;
        let meta: Metadata = serde_json::from_slice(body)?;
        let width = meta.dtype.size_of();
        let mut cursor = 15 + len;
        let mut entries = Vec::with_capacity(meta.entries.len());
        for em in meta.entries {
            let n: usize = em.shape.iter().product();
            let raw = bytes
                .get(cursor..cursor + n * width)
                .ok_or_else(|| bad(&format!("truncated array `{}`", em.name)))?;
            cursor += n * width;
            let data: Vec<f64> = match meta.dtype {
                DType::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
                DType::F64 => raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            };
            entries.push(Entry {
                tensor: Tensor::new(&em.shape, data)?,
                name: em.name,
                frozen: em.frozen,
            });
        }
        if cursor != bytes.len() {
            return Err(bad("trailing bytes after last array"));
        }
        Ok(Self {
            dtype: meta.dtype,
            step: meta.step,
            entries,
            attrs: meta.attrs,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_starts_with_magic_and_length() {
        let mut ck = Checkpoint::new(DType::F32);
        ck.push("a", Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap(), true);
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(&bytes[..7], b"ASDKIT1");
        let len = u64::from_le_bytes(bytes[7..15].try_into().unwrap()) as usize;
        assert_eq!(bytes.len(), 15 + len + 8);
        assert_eq!(&bytes[15 + len..15 + len + 4], &1.0f32.to_le_bytes());
        let meta: serde_json::Value = serde_json::from_slice(&bytes[15..15 + len]).unwrap();
        assert_eq!(meta["dtype"], "f32");
        assert_eq!(meta["entries"][0]["frozen"], true);
    }

    #[test]
    fn rejects_truncated() {
        let mut ck = Checkpoint::new(DType::F64);
        ck.push("a", Tensor::zeros(&[4]), false);
        let bytes = ck.to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::from_bytes(b"NOTMAGIC0000000").is_err());
    }
}
