//! Binary checkpoint format.
//!
//! Layout: the 8-byte magic `FLDCKPT\0`, a little-endian `u32` format version,
//! a little-endian `u32` header length, a UTF-8 JSON header, then every tensor's
//! values as little-endian `f64` in layout order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DenoiserConfig, DenoiserParams};
use crate::error::{FloodError, Result};
use crate::tensor::Mat;

const MAGIC: &[u8; 8] = b"FLDCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: DenoiserConfig,
    tensors: Vec<TensorEntry>,
    #[serde(default)]
    metadata: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

fn corrupt(msg: impl Into<String>) -> FloodError {
    FloodError::InvalidArgument(format!("bad checkpoint: {}", msg.into()))
}

pub fn write_checkpoint<W: Write>(params: &DenoiserParams, w: W) -> std::io::Result<()> {
    write_checkpoint_with(params, &serde_json::Value::Null, w)
}

/// Like [`write_checkpoint`], storing `metadata` (any JSON value) in the header.
pub fn write_checkpoint_with<W: Write>(
    params: &DenoiserParams,
    metadata: &serde_json::Value,
    mut w: W,
) -> std::io::Result<()> {
    let header = Header {
        config: params.cfg.clone(),
        tensors: params
            .cfg
            .layout()
            .into_iter()
            .map(|(name, rows, cols)| TensorEntry { name, rows, cols })
            .collect(),
        metadata: metadata.clone(),
    };
    let json = serde_json::to_vec(&header).map_err(std::io::Error::other)?;
    w.write_all(MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    let mut buf = Vec::with_capacity(params.param_count() * 8);
    for t in &params.tensors {
        for v in t.as_slice() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    w.flush()
}

pub fn read_checkpoint<R: Read>(r: R) -> Result<DenoiserParams> {
    read_checkpoint_with(r).map(|(p, _)| p)
}

/// Reads a checkpoint and the metadata stored alongside it.
pub fn read_checkpoint_with<R: Read>(mut r: R) -> Result<(DenoiserParams, serde_json::Value)> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| corrupt(format!("read failed: {e}")))?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(corrupt("missing magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let hlen = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let body = bytes
        .get(16..16 + hlen)
        .ok_or_else(|| corrupt("truncated header"))?;
    let header: Header =
        serde_json::from_slice(body).map_err(|e| corrupt(format!("header: {e}")))?;
    header.config.validate()?;
    let layout = header.config.layout();
    if layout.len() != header.tensors.len()
        || layout
            .iter()
            .zip(&header.tensors)
            .any(|((n, r, c), e)| *n != e.name || *r != e.rows || *c != e.cols)
    {
        return Err(corrupt("tensor table does not match the configuration"));
    }
    let mut data = &bytes[16 + hlen..];
    let total: usize = layout.iter().map(|(_, r, c)| r * c).sum();
    if data.len() != total * 8 {
        return Err(corrupt(format!(
            "expected {} payload bytes, found {}",
            total * 8,
            data.len()
        )));
    }
    let mut tensors = Vec::with_capacity(layout.len());
    for (_, rows, cols) in layout {
        let n = rows * cols;
        let vals = data[..n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        data = &data[n * 8..];
        tensors.push(Mat::from_vec(rows, cols, vals));
    }
    Ok((DenoiserParams::from_tensors(header.config, tensors), header.metadata))
}

pub fn save_checkpoint(params: &DenoiserParams, path: impl AsRef<Path>) -> Result<()> {
    save_checkpoint_with(params, &serde_json::Value::Null, path)
}

pub fn save_checkpoint_with(
    params: &DenoiserParams,
    metadata: &serde_json::Value,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let f = std::fs::File::create(path).map_err(|e| FloodError::io(path, e))?;
    write_checkpoint_with(params, metadata, std::io::BufWriter::new(f)).map_err(|e| FloodError::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<DenoiserParams> {
    load_checkpoint_with(path).map(|(p, _)| p)
}

pub fn load_checkpoint_with(path: impl AsRef<Path>) -> Result<(DenoiserParams, serde_json::Value)> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| FloodError::io(path, e))?;
    read_checkpoint_with(std::io::BufReader::new(f))
}
