//! Binary parameter checkpoints.
//!
//! Layout: 8-byte magic, little-endian `u32` version, `u64` header length,
//! a JSON header describing the base, the bijector chain and the parameter
//! layout, then every parameter as a little-endian `f64`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::FlowModel;
use crate::bijectors::Chain;
use crate::distributions::StandardNormalBase;
use crate::nn::{LayoutEntry, ParamStore};
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"NFBCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    base: StandardNormalBase,
    chain: Chain,
    layout: Vec<LayoutEntry>,
    n_values: usize,
}

pub fn save_checkpoint(model: &FlowModel, path: &Path) -> Result<()> {
    let header = serde_json::to_vec(&Header {
        base: model.base,
        chain: model.chain.clone(),
        layout: model.params.layout().to_vec(),
        n_values: model.params.len(),
    })?;
    let values = model.params.values();
    let mut buf = Vec::with_capacity(20 + header.len() + 8 * values.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<FlowModel> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Checkpoint(format!("{}: {msg}", path.display()));
    if buf.len() < 20 || &buf[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(buf[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let header_len = u64::from_le_bytes(buf[12..20].try_into().expect("8 bytes")) as usize;
    let body = &buf[20..];
    if body.len() < header_len {
        return Err(bad("truncated header"));
    }
    let header: Header = serde_json::from_slice(&body[..header_len])?;
    let raw = &body[header_len..];
    if raw.len() != header.n_values * 8 {
        return Err(bad(&format!("expected {} parameters, found {} bytes", header.n_values, raw.len())));
    }
    let values = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let params = ParamStore::from_parts(values, header.layout)?;
    for b in header.chain.bijectors() {
        if b.dim() != header.base.dim {
            return Err(bad("bijector dimension disagrees with base"));
        }
    }
    FlowModel::from_parts(header.base.dim, header.chain, params)
}
