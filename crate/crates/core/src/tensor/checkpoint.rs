//! Versioned binary checkpoints of named tensors.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! "AXCK" version manifest_len manifest_json count
//! count × { name_len name rank dims[rank] f32[Π dims] }
//! ```
//!
//! Parameters and normalization buffers share the tensor list; buffers are
//! stored as rank-1 tensors.

use std::fs;
use std::path::Path;

use super::params::ParamStore;
use super::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"AXCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: serde_json::Value,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, manifest: serde_json::Value) -> Self {
        let params = store.params().iter().map(|p| NamedTensor {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            data: p.value.data().iter().map(|&v| v as f32).collect(),
        });
        let buffers = store.buffers().iter().map(|b| NamedTensor {
            name: b.name.clone(),
            shape: vec![b.value.len()],
            data: b.value.iter().map(|&v| v as f32).collect(),
        });
        Checkpoint {
            manifest,
            tensors: params.chain(buffers).collect(),
        }
    }

    fn find(&self, name: &str) -> Result<&NamedTensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
    }

    /// Copies every parameter and buffer of `store` from the checkpoint.
    pub fn apply(&self, store: &mut ParamStore) -> Result<()> {
        let mut restored = store.clone();
        for id in store.ids() {
            let p = store.get(id);
            let t = self.find(&p.name)?;
            if t.shape != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` has shape {:?}, expected {:?}",
                    p.name,
                    t.shape,
                    p.value.shape()
                )));
            }
            *restored.value_mut(id) =
                Tensor::new(t.shape.clone(), t.data.iter().map(|&v| v as f64).collect())?;
        }
        for (i, b) in store.buffers().iter().enumerate() {
            let t = self.find(&b.name)?;
            if t.data.len() != b.value.len() {
                return Err(Error::Checkpoint(format!(
                    "buffer `{}` length mismatch",
                    b.name
                )));
            }
            restored.buffers_mut()[i].value = t.data.iter().map(|&v| v as f64).collect();
        }
        *store = restored;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let put = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put(&mut out, CHECKPOINT_VERSION as usize);
        let manifest = serde_json::to_vec(&self.manifest).expect("json value serializes");
        put(&mut out, manifest.len());
        out.extend_from_slice(&manifest);
        put(&mut out, self.tensors.len());
        for t in &self.tensors {
            put(&mut out, t.name.len());
            out.extend_from_slice(t.name.as_bytes());
            put(&mut out, t.shape.len());
            for &d in &t.shape {
                put(&mut out, d);
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let mlen = r.u32()? as usize;
        let manifest = serde_json::from_slice(r.take(mlen)?)?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec()).map_err(|_| {
                Error::Checkpoint(format!("tensor name at byte {} is not UTF-8", r.pos))
            })?;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let data = r
                .take(
                    numel
                        .checked_mul(4)
                        .ok_or_else(|| Error::Checkpoint("tensor too large".into()))?,
                )?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push(NamedTensor { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint { manifest, tensors })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::Checkpoint(format!("truncated at byte {} (needed {n} more)", self.pos))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    store: &ParamStore,
    manifest: serde_json::Value,
) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, Checkpoint::from_store(store, manifest).to_bytes())
        .map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    Checkpoint::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
