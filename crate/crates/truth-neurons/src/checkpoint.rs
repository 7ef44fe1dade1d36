//! Bit-exact checkpoint file format.
//!
//! Layout: magic bytes `TNCKPT01`; a u32 little-endian length prefix plus a
//! UTF-8 JSON header (model config, vocabulary, parameter declarations);
//! then every parameter array as little-endian f64 in declaration order.

use crate::model::{param_declarations, Model, ModelConfig, Param};
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

pub const MAGIC_PREFIX: &[u8; 6] = b"TNCKPT";
pub const VERSION: &str = "01";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("checkpoint version {found} not supported (this build reads {supported})")]
    VersionMismatch { found: String, supported: String },
    #[error("truncated checkpoint: expected {expected} more bytes for {what}")]
    Truncated { what: String, expected: usize },
    #[error("header is not valid UTF-8 JSON: {0}")]
    BadHeader(String),
    #[error("parameter mismatch: {0}")]
    ParamMismatch(String),
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    vocab: Vec<String>,
    params: Vec<(String, Vec<usize>)>,
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<(), CheckpointError> {
    let header = Header {
        config: model.config.clone(),
        vocab: model.vocab.clone(),
        params: model
            .params
            .iter()
            .map(|p| (p.name.clone(), p.shape.clone()))
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| CheckpointError::BadHeader(e.to_string()))?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC_PREFIX)?;
    w.write_all(VERSION.as_bytes())?;
    w.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    for p in &model.params {
        for &v in &p.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic[..6] != MAGIC_PREFIX {
        return Err(CheckpointError::BadMagic);
    }
    let found = String::from_utf8_lossy(&magic[6..]).to_string();
    if found != VERSION {
        return Err(CheckpointError::VersionMismatch {
            found,
            supported: VERSION.to_string(),
        });
    }
    let mut len_bytes = [0u8; 4];
    read_exact(&mut r, &mut len_bytes, "header length")?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    read_exact(&mut r, &mut header_bytes, "header")?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| CheckpointError::BadHeader(e.to_string()))?;

    let expected = param_declarations(&header.config);
    if header.params != expected {
        return Err(CheckpointError::ParamMismatch(format!(
            "declared {} parameter arrays, config implies {}",
            header.params.len(),
            expected.len()
        )));
    }
    let mut params = Vec::with_capacity(expected.len());
    for (name, shape) in expected {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut buf = [0u8; 8];
        for _ in 0..n {
            read_exact(&mut r, &mut buf, &name)?;
            data.push(f64::from_le_bytes(buf));
        }
        params.push(Param { name, shape, data });
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(CheckpointError::ParamMismatch(
            "trailing bytes after declared parameter arrays".into(),
        ));
    }
    Ok(Model {
        config: header.config,
        vocab: header.vocab,
        params,
    })
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<(), CheckpointError> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            CheckpointError::Truncated {
                what: what.to_string(),
                expected: buf.len(),
            }
        } else {
            CheckpointError::Io(e)
        }
    })
}
