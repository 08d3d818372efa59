//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//! `PFMT1`, 64 hex digest bytes, u32 metadata length, metadata (`key = value`
//! lines carrying the model config), u32 entry count, then per entry: u32 path
//! length, path, u32 ndim, u64 dims, f32 data.

use std::io::Write;
use std::path::Path;

use crate::config::{parse_kv, render_kv};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::nn::ParamStore;
use crate::tensor::{numel, Element, NdArray};

pub const MAGIC: &[u8; 5] = b"PFMT1";

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointEntry {
    pub path: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub digest: String,
    pub metadata: Vec<(String, String)>,
    pub entries: Vec<CheckpointEntry>,
}

impl Checkpoint {
    /// Snapshot of every parameter and buffer, stored as f32.
    pub fn capture<T: Element>(config: &ModelConfig, store: &ParamStore<T>, extra: &[(String, String)]) -> Self {
        let mut metadata = config.to_pairs();
        metadata.extend(extra.iter().cloned());
        let entries = store
            .ids()
            .map(|id| {
                let v = store.get(id);
                CheckpointEntry {
                    path: store.spec(id).path.clone(),
                    shape: v.shape().to_vec(),
                    data: v.data().iter().map(|x| x.as_f64() as f32).collect(),
                }
            })
            .collect();
        Checkpoint {
            digest: config.digest(),
            metadata,
            entries,
        }
    }

    /// The model config recorded in the metadata; verified against the header digest.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut cfg = ModelConfig::preset("tiny")?;
        for (k, v) in &self.metadata {
            cfg.apply(k, v)?;
        }
        if cfg.digest() != self.digest {
            return Err(Error::Checkpoint(
                "metadata does not reproduce the header digest".into(),
            ));
        }
        Ok(cfg)
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Copies every entry into `store`, failing fast unless `config` hashes to
    /// the recorded digest and every path and shape matches.
    pub fn restore<T: Element>(&self, config: &ModelConfig, store: &mut ParamStore<T>) -> Result<()> {
        let expected = config.digest();
        if expected != self.digest {
            return Err(Error::DigestMismatch {
                expected,
                found: self.digest.clone(),
            });
        }
        if self.entries.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "{} entries for a model with {} buffers",
                self.entries.len(),
                store.len()
            )));
        }
        for e in &self.entries {
            let id = store
                .find(&e.path)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {}", e.path)))?;
            let value = NdArray::new(&e.shape, e.data.iter().map(|&x| T::of(x as f64)).collect())?;
            store.set(id, value)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(self.digest.as_bytes());
        let meta = render_kv(&self.metadata);
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.path.len() as u32).to_le_bytes());
            out.extend_from_slice(e.path.as_bytes());
            out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
            for &d in &e.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in &e.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(5)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let digest = String::from_utf8(r.take(64)?.to_vec())
            .map_err(|_| Error::Checkpoint("digest is not ASCII".into()))?;
        let meta_len = r.u32()? as usize;
        let meta = std::str::from_utf8(r.take(meta_len)?)
            .map_err(|_| Error::Checkpoint("metadata is not UTF-8".into()))?;
        let metadata = parse_kv(meta)?;
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let path = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Checkpoint("path is not UTF-8".into()))?
                .to_string();
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = numel(&shape);
            let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("entry too large".into()))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            entries.push(CheckpointEntry { path, shape, data });
        }
        if r.at != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.at)));
        }
        Ok(Checkpoint {
            digest,
            metadata,
            entries,
        })
    }

    /// Writes to a sibling temporary file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::config(format!("{} has no file name", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated: need {n} bytes at offset {}", self.at))
        })?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }
}
