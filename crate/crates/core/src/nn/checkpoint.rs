//! Binary checkpoint container.
//!
//! Layout (little endian): magic `CTRLCAP\0`, `u32` version, `u32` config
//! length, config JSON, `u32` parameter count, then per parameter `u32` name
//! length, name, `u32` rows, `u32` cols and `rows * cols` `f32` values.

use std::fs;
use std::path::Path;

use super::params::ParamStore;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"CTRLCAP\0";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode(config: &serde_json::Value, store: &ParamStore) -> Vec<u8> {
    let cfg = serde_json::to_vec(config).expect("json value serializes");
    let mut out = Vec::with_capacity(store.num_scalars() * 4 + cfg.len() + 64);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(&cfg);
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, p) in store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.value.rows as u32).to_le_bytes());
        out.extend_from_slice(&(p.value.cols as u32).to_le_bytes());
        for &v in &p.value.data {
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
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Stored parameters in file order: `(name, rows, cols, values)`.
pub type StoredParams = Vec<(String, usize, usize, Vec<f32>)>;

pub fn decode(bytes: &[u8]) -> Result<(serde_json::Value, StoredParams)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let n = r.u32()? as usize;
    let config: serde_json::Value = serde_json::from_slice(r.take(n)?)?;
    let count = r.u32()? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let raw = r.take(rows * cols * 4)?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        params.push((name, rows, cols, values));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok((config, params))
}

pub fn save(path: &Path, config: &serde_json::Value, store: &ParamStore) -> Result<()> {
    fs::write(path, encode(config, store)).map_err(|e| Error::io(path, e))
}

/// Reads only the stored config.
pub fn read_config(path: &Path) -> Result<serde_json::Value> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode(&bytes)?.0)
}

/// Loads values into `store`, which must have been built from the same
/// config. Refuses on any config, name or shape mismatch.
pub fn load_into(bytes: &[u8], expected_config: &serde_json::Value, store: &mut ParamStore) -> Result<()> {
    let (config, params) = decode(bytes)?;
    if &config != expected_config {
        return Err(Error::Checkpoint("model config does not match the checkpoint".into()));
    }
    if params.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} parameters, model has {}",
            params.len(),
            store.len()
        )));
    }
    for (name, rows, cols, values) in params {
        let id = store
            .id(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        let t = store.get_mut(id);
        if (t.rows, t.cols) != (rows, cols) {
            return Err(Error::Checkpoint(format!(
                "{name}: stored shape {rows}x{cols}, expected {}x{}",
                t.rows, t.cols
            )));
        }
        for (d, s) in t.data.iter_mut().zip(values) {
            *d = s as f64;
        }
    }
    Ok(())
}

pub fn load(path: &Path, expected_config: &serde_json::Value, store: &mut ParamStore) -> Result<()> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    load_into(&bytes, expected_config, store)
}
