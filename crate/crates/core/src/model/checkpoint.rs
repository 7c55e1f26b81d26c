//! Checkpoint container.
//!
//! ```text
//! magic      8 bytes  "HEEDCKPT"
//! version    u32 LE   1
//! header_len u32 LE   length of the JSON header
//! header     JSON     {"config": ToyConfig, "kinds": ["attention"|"mixer", ...]}
//! count      u32 LE   number of arrays
//! per array: name_len u32, name (UTF-8), rows u32, cols u32, rows*cols f64 LE (row-major)
//! ```
//!
//! Arrays appear in name order, so equal models serialize to equal bytes.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{BlockKind, ToyConfig, ToyModel};

pub const MAGIC: &[u8; 8] = b"HEEDCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("bad header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("bad array name")]
    BadName,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ToyConfig,
    kinds: Vec<BlockKind>,
}

pub fn to_bytes(model: &ToyModel) -> Vec<u8> {
    let header = serde_json::to_vec(&Header {
        config: model.config.clone(),
        kinds: model.kinds.clone(),
    })
    .expect("header serializes");
    let mut out = Vec::with_capacity(64 + header.len() + model.n_params() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for (name, p) in &model.params {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(p.nrows() as u32).to_le_bytes());
        out.extend_from_slice(&(p.ncols() as u32).to_le_bytes());
        for x in p.iter() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self
            .bytes
            .get(self.pos..end)
            .ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<ToyModel, CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let hlen = r.u32()? as usize;
    let header: Header = serde_json::from_slice(r.take(hlen)?)?;
    let count = r.u32()?;
    let mut params = BTreeMap::new();
    for _ in 0..count {
        let nlen = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(nlen)?)
            .map_err(|_| CheckpointError::BadName)?
            .to_string();
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let n = rows.checked_mul(cols).ok_or(CheckpointError::Truncated)?;
        let raw = r.take(n.checked_mul(8).ok_or(CheckpointError::Truncated)?)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.insert(
            name,
            Array2::from_shape_vec((rows, cols), data).expect("shape matches"),
        );
    }
    Ok(ToyModel {
        config: header.config,
        kinds: header.kinds,
        params,
    })
}

pub fn save(model: &ToyModel, path: &Path) -> Result<(), CheckpointError> {
    std::fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ToyModel, CheckpointError> {
    from_bytes(&std::fs::read(path)?)
}
