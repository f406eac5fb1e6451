//! Binary model checkpoints.
//!
//! Layout: the 8-byte magic `SEQLABV1`, a version byte, a little-endian
//! `u64` header length and the JSON header, then a `u32` tensor count and
//! per tensor a `u32` name length, the UTF-8 name, a `u32` rank, `u64`
//! dimensions and the little-endian `f64` entries.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use seqlab::data::{ColumnSelection, NormStats};
use seqlab::training::TrainingConfig;
use seqlab::{Architecture, Error, Model, Result};

pub const MAGIC: &[u8; 8] = b"SEQLABV1";
pub const VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub arch: Architecture,
    pub class_names: Vec<String>,
    pub feature_names: Vec<String>,
    pub normalization: Option<NormStats>,
    pub columns: ColumnSelection,
    pub decimation: usize,
    pub training: TrainingConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    pub model: Model,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.header.arch != self.model.arch {
            return Err(bad("header architecture does not match the model"));
        }
        let header = serde_json::to_vec(&self.header).map_err(|e| bad(e.to_string()))?;
        let tensors = self.model.tensors();
        let mut out = Vec::with_capacity(64 + header.len() + 8 * self.model.param_count());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for t in &tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Parses and validates a whole checkpoint; nothing is returned unless
    /// every tensor is present with its expected shape.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(bad("not a checkpoint (magic mismatch)"));
        }
        let version = r.take(1)?[0];
        if version != VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let header_len = r.u64()? as usize;
        let header: Header = serde_json::from_slice(r.take(header_len)?).map_err(|e| bad(format!("header: {e}")))?;

        let count = r.u32()? as usize;
        let mut payload: BTreeMap<String, (Vec<usize>, &[u8])> = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| bad("tensor name is not UTF-8"))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len = shape
                .iter()
                .try_fold(8usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| bad(format!("tensor {name}: shape overflows")))?;
            let data = r.take(len)?;
            if payload.insert(name.clone(), (shape, data)).is_some() {
                return Err(bad(format!("duplicate tensor {name}")));
            }
        }
        if r.pos != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - r.pos)));
        }

        let mut model = Model::zeros(header.arch.clone()).map_err(|e| bad(format!("header architecture: {e}")))?;
        let expected = model.tensors().len();
        for t in model.tensors_mut() {
            let (shape, data) = payload
                .remove(&t.name)
                .ok_or_else(|| bad(format!("missing tensor {}", t.name)))?;
            if shape != t.shape {
                return Err(bad(format!("tensor {}: shape {:?}, expected {:?}", t.name, shape, t.shape)));
            }
            for (dst, chunk) in t.data.iter_mut().zip(data.chunks_exact(8)) {
                *dst = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
            }
        }
        if let Some(extra) = payload.keys().next() {
            return Err(bad(format!("unexpected tensor {extra} ({count} stored, {expected} expected)")));
        }
        Ok(Checkpoint { header, model })
    }

    /// Writes through a temporary sibling file and renames it into place,
    /// so `path` only ever holds a complete checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = temp_sibling(path);
        let write = || -> std::io::Result<()> {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
            fs::rename(&tmp, path)
        };
        write().map_err(|e| {
            let _ = fs::remove_file(&tmp);
            Error::Io {
                path: path.to_path_buf(),
                source: e,
            }
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

pub(crate) fn temp_sibling(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(format!(".tmp{}", std::process::id()));
    path.with_file_name(name)
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
            .ok_or_else(|| bad(format!("truncated at byte {} (wanted {n} more)", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
