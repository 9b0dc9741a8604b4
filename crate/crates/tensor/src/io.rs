//! Named-tensor container.
//!
//! Layout: a compact JSON header mapping each name to
//! `{"dtype", "shape", "byte_offset"}`, the two-byte sentinel `"\n\0"`, then
//! the little-endian payloads. Offsets are relative to the first payload
//! byte. Names are stored sorted so identical contents give identical bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::{Scalar, Tensor};

pub const SENTINEL: &[u8] = b"\n\0";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeaderEntry {
    pub dtype: String,
    pub shape: Vec<usize>,
    pub byte_offset: usize,
}

pub fn encode<T: Scalar>(tensors: &IndexMap<String, Tensor<T>>) -> Vec<u8> {
    let sorted: BTreeMap<&String, &Tensor<T>> = tensors.iter().collect();
    let mut header = BTreeMap::new();
    let mut payload = Vec::new();
    for (name, t) in sorted {
        header.insert(
            name.clone(),
            HeaderEntry { dtype: T::DTYPE.to_string(), shape: t.shape().to_vec(), byte_offset: payload.len() },
        );
        for &v in t.data() {
            v.write_le(&mut payload);
        }
    }
    let mut out = serde_json::to_vec(&header).expect("header serialises");
    out.extend_from_slice(SENTINEL);
    out.extend_from_slice(&payload);
    out
}

/// Decodes a container, converting stored `f32`/`f64` payloads to `T`.
pub fn decode<T: Scalar>(bytes: &[u8], origin: &str) -> Result<IndexMap<String, Tensor<T>>> {
    let fmt = |msg: String| TensorError::Format { path: origin.to_string(), msg };
    let split = bytes
        .windows(SENTINEL.len())
        .position(|w| w == SENTINEL)
        .ok_or_else(|| fmt("missing header sentinel".into()))?;
    let header: BTreeMap<String, HeaderEntry> =
        serde_json::from_slice(&bytes[..split]).map_err(|e| fmt(format!("bad header: {e}")))?;
    let payload = &bytes[split + SENTINEL.len()..];
    let mut out = IndexMap::new();
    for (name, entry) in header {
        let numel: usize = entry.shape.iter().product();
        let width = match entry.dtype.as_str() {
            "f32" => 4,
            "f64" => 8,
            other => return Err(fmt(format!("unsupported dtype `{other}` for `{name}`"))),
        };
        let end = entry.byte_offset + numel * width;
        if end > payload.len() {
            return Err(fmt(format!("payload of `{name}` runs past end of file")));
        }
        let raw = &payload[entry.byte_offset..end];
        let data: Vec<T> = if width == 4 {
            raw.chunks_exact(4).map(|c| T::of(f32::read_le(c) as f64)).collect()
        } else {
            raw.chunks_exact(8).map(|c| T::of(f64::read_le(c))).collect()
        };
        out.insert(name, Tensor::new(entry.shape, data)?);
    }
    Ok(out)
}

pub fn save<T: Scalar>(path: &Path, tensors: &IndexMap<String, Tensor<T>>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, encode(tensors))?;
    Ok(())
}

pub fn load<T: Scalar>(path: &Path) -> Result<IndexMap<String, Tensor<T>>> {
    let bytes = fs::read(path)?;
    decode(&bytes, &path.display().to_string())
}
