//! Parameter checkpoints.
//!
//! ```text
//! magic        8 bytes  "MICLCKPT"
//! version      u32      1
//! manifest_len u64
//! manifest     JSON (CheckpointMeta)
//! count        u64      number of tensors
//! per tensor:  name_len u32, name (UTF-8), ndim u32, dims u64 × ndim, data f64 × len
//! ```
//!
//! Integers and floats are little-endian; data round-trips bit for bit.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::params::ParamStore;
use super::transformer::Model;
use crate::autodiff::Tensor;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"MICLCKPT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub seed: u64,
    pub step: u64,
    /// Free-form run information, typically the resolved run configuration.
    #[serde(default)]
    pub run: serde_json::Value,
}

pub fn save_checkpoint(path: &Path, model: &Model, meta: &CheckpointMeta) -> Result<()> {
    if meta.model != *model.config() {
        return Err(Error::Contract(
            "checkpoint manifest config differs from the model's".into(),
        ));
    }
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(fs::File::create(path).map_err(io)?);
    let manifest = serde_json::to_vec(meta).map_err(|e| Error::Format {
        path: path.into(),
        reason: e.to_string(),
    })?;
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(manifest.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&manifest).map_err(io)?;
    let params = model.params();
    w.write_all(&(params.len() as u64).to_le_bytes()).map_err(io)?;
    for (name, t) in params.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(name.as_bytes()).map_err(io)?;
        w.write_all(&(t.ndim() as u32).to_le_bytes()).map_err(io)?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes()).map_err(io)?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

struct Reader<'a> {
    bytes: &'a [u8],
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn bad(&self, reason: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.into(),
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() < n {
            return Err(self.bad("unexpected end of file"));
        }
        let (head, rest) = self.bytes.split_at(n);
        self.bytes = rest;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| self.bad(format!("length {v} overflows")))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, CheckpointMeta)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { bytes: &bytes, path };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(r.bad("not a checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.bad(format!("unsupported checkpoint version {version}")));
    }
    let manifest_len = r.len()?;
    let meta: CheckpointMeta =
        serde_json::from_slice(r.take(manifest_len)?).map_err(|e| r.bad(format!("manifest: {e}")))?;
    let count = r.len()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| r.bad("tensor name is not UTF-8"))?
            .to_string();
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= r.bytes.len()))
            .ok_or_else(|| r.bad(format!("tensor {name} is truncated")))?;
        let raw = r.take(numel * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        store
            .insert(name, Tensor::new(shape, data)?)
            .map_err(|e| r.bad(e.to_string()))?;
    }
    if !r.bytes.is_empty() {
        return Err(r.bad(format!("{} trailing bytes", r.bytes.len())));
    }
    let model = Model::from_params(meta.model.clone(), store).map_err(|e| r.bad(e.to_string()))?;
    Ok((model, meta))
}
