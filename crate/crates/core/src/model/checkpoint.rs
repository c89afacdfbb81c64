//! Binary checkpoint format.
//!
//! ```text
//! magic        4 bytes   "HTNC"
//! version      u32 LE    currently 1
//! config_len   u32 LE
//! config       config_len bytes of UTF-8 JSON (ModelConfig)
//! count        u32 LE    number of tensors
//! count times:
//!   name_len   u32 LE
//!   name       name_len bytes UTF-8
//!   rank       u32 LE
//!   dims       rank x u64 LE
//!   values     prod(dims) x f32 LE
//! ```
//!
//! Values are stored as `f32`. Parameters produced by [`ModelParams::init`] and by the
//! optimizer are always `f32`-representable, so `load(save(p)) == p` bit for bit.

use std::collections::HashMap;
use std::path::Path;

use super::config::ModelConfig;
use super::params::ModelParams;
use crate::numerics::Tensor;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"HTNC";
pub const VERSION: u32 = 1;

pub fn to_bytes(config: &ModelConfig, params: &ModelParams) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = serde_json::to_vec(config).expect("config serializes");
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(&cfg);
    let named = params.named();
    out.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, t) in named {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<(ModelConfig, ModelParams)> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic (not an HTNC checkpoint)".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let cfg_len = r.u32("config length")? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(cfg_len, "config")?)
        .map_err(|e| Error::Checkpoint(format!("config block: {e}")))?;
    config
        .validate()
        .map_err(|e| Error::Checkpoint(format!("config block: {e}")))?;

    let count = r.u32("tensor count")? as usize;
    let mut tensors: HashMap<String, Tensor> = HashMap::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        if rank > 8 {
            return Err(Error::Checkpoint(format!("tensor {name} has implausible rank {rank}")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u64("dims")? as usize);
        }
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(format!("tensor {name} size overflows")))?;
        let bytes = r.take(n.checked_mul(4).unwrap_or(usize::MAX), "values")?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        if tensors.insert(name.clone(), Tensor::new(dims, data)?).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
        }
    }
    if r.pos != buf.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
    }

    let mut params = ModelParams::zeros_like(&config)?;
    let mut err = None;
    params.visit_mut(&mut |name, slot| match tensors.remove(name) {
        Some(t) if t.shape() == slot.shape() => *slot = t,
        Some(t) => {
            err.get_or_insert_with(|| {
                Error::Checkpoint(format!("tensor {name} has shape {:?}, expected {:?}", t.shape(), slot.shape()))
            });
        }
        None => {
            err.get_or_insert_with(|| Error::Checkpoint(format!("missing tensor {name}")));
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
    }
    Ok((config, params))
}

pub fn save(path: impl AsRef<Path>, config: &ModelConfig, params: &ModelParams) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_bytes(config, params)).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<(ModelConfig, ModelParams)> {
    let path = path.as_ref();
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&buf)
}
