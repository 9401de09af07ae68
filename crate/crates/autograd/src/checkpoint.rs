//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "WSTCKPT\0"
//! version  u32
//! header   u32 length + UTF-8 JSON (keys sorted)
//! count    u32
//! params   count x { u32 name length, name, u32 ndim, ndim x u64 dims, f64 values row-major }
//! digest   32 bytes SHA-256 of everything above
//! ```
//!
//! Identical stores and headers serialize to identical bytes.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, TensorError};
use crate::matrix::Matrix;
use crate::params::ParamStore;

pub const MAGIC: &[u8; 8] = b"WSTCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    /// Model family, e.g. `classifier`, `lm`, `seq2seq`.
    pub kind: String,
    pub config_hash: String,
    pub seed: u64,
    /// Free-form tags: vocabulary hash, style, direction, stage.
    pub tags: BTreeMap<String, String>,
}

impl CheckpointHeader {
    pub fn new(kind: &str, config_hash: &str, seed: u64) -> Self {
        CheckpointHeader {
            kind: kind.to_string(),
            config_hash: config_hash.to_string(),
            seed,
            tags: BTreeMap::new(),
        }
    }

    pub fn with_tag(mut self, key: &str, value: impl ToString) -> Self {
        self.tags.insert(key.to_string(), value.to_string());
        self
    }

    pub fn tag(&self, key: &str) -> Option<&str> {
        self.tags.get(key).map(String::as_str)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: Vec<(String, Matrix)>,
}

fn bad(msg: impl Into<String>) -> TensorError {
    TensorError::Checkpoint(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(bad("truncated"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    pub fn from_store(header: CheckpointHeader, store: &ParamStore) -> Self {
        let params = store
            .iter()
            .map(|(_, p)| (p.name.clone(), p.tensor.values.clone()))
            .collect();
        Checkpoint { header, params }
    }

    /// Loads values into `store`; every parameter of the store must be
    /// present with the same shape.
    pub fn apply_to(&self, store: &mut ParamStore) -> Result<()> {
        let by_name: BTreeMap<&str, &Matrix> =
            self.params.iter().map(|(n, m)| (n.as_str(), m)).collect();
        let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.name.clone())).collect();
        for (id, name) in ids {
            let src = by_name
                .get(name.as_str())
                .ok_or_else(|| bad(format!("missing parameter `{name}`")))?;
            let dst = store.value_mut(id);
            if dst.shape != src.shape {
                return Err(bad(format!(
                    "parameter `{name}` has shape {} in checkpoint, {} in model",
                    src.shape, dst.shape
                )));
            }
            dst.data.copy_from_slice(&src.data);
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, m) in &self.params {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&2u32.to_le_bytes());
            for d in m.shape.dims() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &m.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 32 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("digest mismatch"));
        }
        let mut r = Reader { buf: body, pos: 8 };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let hlen = r.u32()? as usize;
        let header: CheckpointHeader =
            serde_json::from_slice(r.take(hlen)?).map_err(|e| bad(format!("header: {e}")))?;
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec()).map_err(|_| bad("name is not UTF-8"))?;
            let ndim = r.u32()? as usize;
            if ndim != 2 {
                return Err(bad(format!("`{name}` has {ndim} dims, expected 2")));
            }
            let rows = r.u64()? as usize;
            let cols = r.u64()? as usize;
            let raw = r.take(rows * cols * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            params.push((name, Matrix::from_vec(rows, cols, data)?));
        }
        if r.pos != body.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Checkpoint { header, params })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
