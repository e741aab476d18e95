//! Binary tensor container shared by checkpoints and feature files.
//!
//! Layout: a UTF-8 JSON header, one `\0` byte, then the payloads of the
//! listed tensors concatenated in header order as little-endian `f64`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::ParamStore;
use crate::tensor::Tensor;

pub const DTYPE: &str = "f64le";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub schema_version: u32,
    pub dtype: String,
    pub tensors: Vec<TensorEntry>,
    /// Free-form metadata (checkpoint kind, stream, feature-file fields).
    #[serde(default)]
    pub meta: serde_json::Value,
}

impl Header {
    pub fn new(tensors: Vec<TensorEntry>, meta: serde_json::Value) -> Self {
        Header {
            schema_version: SCHEMA_VERSION,
            dtype: DTYPE.to_string(),
            tensors,
            meta,
        }
    }
}

pub fn encode(named: &[(&str, &Tensor)], meta: serde_json::Value) -> Result<Vec<u8>> {
    let header = Header::new(
        named
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        meta,
    );
    let mut bytes = serde_json::to_vec(&header)?;
    bytes.push(0);
    for (_, t) in named {
        bytes.extend_from_slice(&t.to_le_bytes());
    }
    Ok(bytes)
}

/// Parses a container; `origin` is only used in error messages.
pub fn decode(bytes: &[u8], origin: &Path) -> Result<(Header, Vec<(String, Tensor)>)> {
    let malformed = |detail: String| Error::MalformedHeader {
        path: origin.to_path_buf(),
        detail,
    };
    let split = bytes
        .iter()
        .position(|&b| b == 0)
        .ok_or_else(|| malformed("missing NUL separator after header".into()))?;
    let header: Header =
        serde_json::from_slice(&bytes[..split]).map_err(|e| malformed(format!("header is not valid JSON: {e}")))?;
    if header.dtype != DTYPE {
        return Err(malformed(format!(
            "unsupported dtype {:?}, expected {DTYPE:?}",
            header.dtype
        )));
    }
    if header.schema_version != SCHEMA_VERSION {
        return Err(malformed(format!(
            "unsupported schema version {}",
            header.schema_version
        )));
    }
    let payload = &bytes[split + 1..];
    let mut expected = 0usize;
    for entry in &header.tensors {
        if entry.shape.is_empty() || entry.shape.contains(&0) {
            return Err(malformed(format!(
                "tensor {} has invalid shape {:?}",
                entry.name, entry.shape
            )));
        }
        expected += entry.shape.iter().product::<usize>() * 8;
    }
    if payload.len() < expected {
        return Err(Error::TruncatedPayload {
            path: origin.to_path_buf(),
            expected,
            found: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(Error::ShapeMismatch {
            path: origin.to_path_buf(),
            detail: format!(
                "payload has {} bytes but declared shapes account for {expected}",
                payload.len()
            ),
        });
    }
    let mut tensors = Vec::with_capacity(header.tensors.len());
    let mut offset = 0;
    for entry in &header.tensors {
        let n: usize = entry.shape.iter().product();
        let data = payload[offset..offset + n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        offset += n * 8;
        tensors.push((entry.name.clone(), Tensor::new(entry.shape.clone(), data)?));
    }
    Ok((header, tensors))
}

pub fn write_file(path: &Path, named: &[(&str, &Tensor)], meta: serde_json::Value) -> Result<()> {
    let bytes = encode(named, meta)?;
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<(Header, Vec<(String, Tensor)>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Saves every parameter of a store; frozen flags go into the metadata.
pub fn save_params(path: &Path, store: &ParamStore, mut meta: serde_json::Value) -> Result<()> {
    let frozen: Vec<bool> = store.iter().map(|(_, p)| p.is_frozen()).collect();
    if let serde_json::Value::Object(map) = &mut meta {
        map.insert("frozen".into(), serde_json::json!(frozen));
    }
    let named: Vec<(&str, &Tensor)> = store.iter().map(|(_, p)| (p.name.as_str(), p.value())).collect();
    write_file(path, &named, meta)
}

/// Loads a checkpoint into an existing store of identical layout.
pub fn load_params(path: &Path, store: &mut ParamStore) -> Result<Header> {
    let (header, tensors) = read_file(path)?;
    let mut loaded = ParamStore::new();
    for (name, t) in tensors {
        loaded.add(name, t);
    }
    store.load_values(&loaded)?;
    if let Some(frozen) = header.meta.get("frozen").and_then(|v| v.as_array()) {
        for ((_, p), f) in store.iter_mut().zip(frozen) {
            p.set_frozen(f.as_bool().unwrap_or(false));
        }
    }
    Ok(header)
}
