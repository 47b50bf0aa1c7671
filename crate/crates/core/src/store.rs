//! Flat little-endian `f32` tensors with a JSON sidecar.
//!
//! `name.f32` holds the raw values in row-major order and `name.json` holds
//! the shape plus arbitrary metadata. Cochleagrams and feature matrices both
//! use this layout.

use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::augment::ClipSpec;
use crate::cochlea::Cochleagram;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: String, message: String },
}

pub type Result<T> = std::result::Result<T, StoreError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Write via a sibling temp file and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = std::fs::File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(bytes).map_err(io_err(&tmp))?;
        f.flush().map_err(io_err(&tmp))?;
    }
    std::fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    Ok(sha256_hex(&bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub shape: Vec<usize>,
    pub dtype: String,
    /// SHA-256 of the `.f32` payload.
    pub sha256: String,
    #[serde(default)]
    pub meta: serde_json::Value,
}

pub fn sidecar_path(data_path: &Path) -> PathBuf {
    data_path.with_extension("json")
}

/// Write `values` (row-major, `shape`) to `path` and its sidecar; returns
/// the payload hash.
pub fn write_tensor(path: &Path, values: &[f32], shape: &[usize], meta: serde_json::Value) -> Result<String> {
    if shape.iter().product::<usize>() != values.len() {
        return Err(StoreError::Format {
            path: path.display().to_string(),
            message: format!("shape {shape:?} does not match {} values", values.len()),
        });
    }
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let hash = sha256_hex(&bytes);
    write_atomic(path, &bytes)?;
    let sidecar = Sidecar {
        shape: shape.to_vec(),
        dtype: "f32le".into(),
        sha256: hash.clone(),
        meta,
    };
    write_atomic(
        &sidecar_path(path),
        &serde_json::to_vec_pretty(&sidecar).expect("sidecar serializes"),
    )?;
    Ok(hash)
}

pub fn read_sidecar(path: &Path) -> Result<Sidecar> {
    let sp = sidecar_path(path);
    let text = std::fs::read(&sp).map_err(io_err(&sp))?;
    serde_json::from_slice(&text).map_err(|e| StoreError::Format {
        path: sp.display().to_string(),
        message: e.to_string(),
    })
}

/// Read a tensor, checking its length and payload hash against the sidecar.
pub fn read_tensor(path: &Path) -> Result<(Vec<f32>, Sidecar)> {
    let sidecar = read_sidecar(path)?;
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let bad = |message: String| StoreError::Format {
        path: path.display().to_string(),
        message,
    };
    let n: usize = sidecar.shape.iter().product();
    if bytes.len() != n * 4 {
        return Err(bad(format!("expected {} bytes, found {}", n * 4, bytes.len())));
    }
    if sha256_hex(&bytes) != sidecar.sha256 {
        return Err(bad("payload hash does not match sidecar".into()));
    }
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((values, sidecar))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CochleagramMeta {
    compression: f64,
    filterbank_hash: String,
    provenance: Option<ClipSpec>,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    lineage: serde_json::Value,
}

/// `lineage` is stored verbatim in the sidecar; pass `Value::Null` for none.
pub fn write_cochleagram(path: &Path, c: &Cochleagram, lineage: &serde_json::Value) -> Result<String> {
    let (h, w) = c.shape();
    let values: Vec<f32> = c.values.iter().copied().collect();
    let meta = serde_json::to_value(CochleagramMeta {
        compression: c.compression,
        filterbank_hash: c.filterbank_hash.clone(),
        provenance: c.provenance.clone(),
        lineage: lineage.clone(),
    })
    .expect("meta serializes");
    write_tensor(path, &values, &[h, w], meta)
}

pub fn read_cochleagram(path: &Path) -> Result<Cochleagram> {
    let (values, sidecar) = read_tensor(path)?;
    let bad = |message: String| StoreError::Format {
        path: path.display().to_string(),
        message,
    };
    let [h, w] = sidecar.shape[..] else {
        return Err(bad(format!("expected a 2-d tensor, got shape {:?}", sidecar.shape)));
    };
    let meta: CochleagramMeta = serde_json::from_value(sidecar.meta).map_err(|e| bad(e.to_string()))?;
    Ok(Cochleagram {
        values: Array2::from_shape_vec((h, w), values).expect("checked length"),
        compression: meta.compression,
        filterbank_hash: meta.filterbank_hash,
        provenance: meta.provenance,
    })
}
