//! Versioned named-tensor container.
//!
//! Layout, little-endian: `"CVQG"`, version `u32`, tensor count `u32`, then per
//! tensor name length `u32`, UTF-8 name, rank `u32`, dims `u32 x rank`, `f32`
//! payload; finally a CRC32 of every preceding byte.
//!
//! The model configuration and vocabulary travel in a JSON sidecar next to
//! the checkpoint (`<file>.meta.json`).

use std::fs;
use std::path::{Path, PathBuf};

use convqg_grad::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::model::{ModelConfig, ParamStore};
use crate::vocab::Vocab;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CVQG";
pub const VERSION: u32 = 1;

pub fn encode(store: &ParamStore<f32>) -> Vec<u8> {
    let payload: usize = store.tensors().iter().map(|t| t.len() * 4).sum();
    let mut out = Vec::with_capacity(16 + payload + store.len() * 48);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, t) in store.names().iter().zip(store.tensors()) {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<ParamStore<f32>> {
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(Error::Checkpoint("CRC mismatch".into()));
    }
    let mut r = Reader { bytes: body, pos: 4 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut names = Vec::with_capacity(count.min(4096));
    let mut tensors = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = n.ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` is too large")))?;
        let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("tensor `{name}`: {e}")))?;
        names.push(name);
        tensors.push(t);
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes after the last tensor".into()));
    }
    ParamStore::from_parts(names, tensors)
}

pub fn save(path: impl AsRef<Path>, store: &ParamStore<f32>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(store)).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<ParamStore<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// SHA-256 of the encoded checkpoint, hex.
pub fn fingerprint(store: &ParamStore<f32>) -> String {
    Sha256::digest(encode(store)).iter().map(|b| format!("{b:02x}")).collect()
}

/// Everything besides the tensors needed to use a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub vocab: Vocab,
    pub embedder_seed: u64,
    pub epoch: usize,
}

pub fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

pub fn save_with_meta(path: impl AsRef<Path>, store: &ParamStore<f32>, meta: &CheckpointMeta) -> Result<()> {
    let path = path.as_ref();
    save(path, store)?;
    let mp = meta_path(path);
    let json = serde_json::to_string_pretty(meta).expect("meta serializes");
    fs::write(&mp, json).map_err(|e| Error::io(&mp, e))
}

/// Loads tensors and sidecar and checks they describe the same model.
pub fn load_with_meta(path: impl AsRef<Path>) -> Result<(ParamStore<f32>, CheckpointMeta)> {
    let path = path.as_ref();
    let store = load(path)?;
    let mp = meta_path(path);
    let text = fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
    let meta: CheckpointMeta =
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", mp.display())))?;
    meta.model.validate()?;
    if meta.vocab.len() != meta.model.vocab_size {
        return Err(Error::Checkpoint("vocabulary size differs from the model config".into()));
    }
    store.check_layout(&meta.model)?;
    Ok((store, meta))
}
