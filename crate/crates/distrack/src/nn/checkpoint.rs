//! Checkpoint archive: a one-line JSON header (format tag, config record,
//! tensor directory) followed by the raw little-endian f64 tensor data.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::params::ParamStore;

pub const FORMAT_TAG: &str = "distrack-checkpoint-v1";

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    config: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

pub fn save(path: &Path, config: &serde_json::Value, store: &ParamStore) -> Result<()> {
    let header = Header {
        format: FORMAT_TAG.to_string(),
        config: config.clone(),
        tensors: (0..store.len())
            .map(|i| {
                let (rows, cols) = store.value(i).dim();
                TensorEntry {
                    name: store.name(i).to_string(),
                    rows,
                    cols,
                }
            })
            .collect(),
    };
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let header_line = serde_json::to_string(&header)
        .map_err(|e| Error::Checkpoint(format!("header serialization failed: {e}")))?;
    file.write_all(header_line.as_bytes())
        .and_then(|_| file.write_all(b"\n"))
        .map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::with_capacity(store.total_elements() * 8);
    for i in 0..store.len() {
        for &v in store.value(i).iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(serde_json::Value, ParamStore)> {
    let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Checkpoint(format!("{}: missing header line", path.display())))?;
    let header: Header = serde_json::from_slice(&bytes[..newline])
        .map_err(|e| Error::Checkpoint(format!("{}: bad header: {e}", path.display())))?;
    if header.format != FORMAT_TAG {
        return Err(Error::Checkpoint(format!(
            "{}: format tag {:?} (expected {FORMAT_TAG:?})",
            path.display(),
            header.format
        )));
    }
    let data = &bytes[newline + 1..];
    let expected: usize = header.tensors.iter().map(|t| t.rows * t.cols * 8).sum();
    if data.len() != expected {
        return Err(Error::Checkpoint(format!(
            "{}: payload is {} bytes, expected {expected}",
            path.display(),
            data.len()
        )));
    }
    let mut store = ParamStore::new();
    let mut at = 0;
    for entry in &header.tensors {
        let n = entry.rows * entry.cols;
        let mut values = Vec::with_capacity(n);
        for k in 0..n {
            let start = at + k * 8;
            let mut raw = [0u8; 8];
            raw.copy_from_slice(&data[start..start + 8]);
            values.push(f64::from_le_bytes(raw));
        }
        at += n * 8;
        let arr = Array2::from_shape_vec((entry.rows, entry.cols), values)
            .map_err(|e| Error::Checkpoint(format!("tensor {}: {e}", entry.name)))?;
        store.add(&entry.name, arr)?;
    }
    Ok((header.config, store))
}
