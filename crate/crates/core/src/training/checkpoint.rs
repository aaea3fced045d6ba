//! Checkpoint files: one JSON manifest line, then the raw little-endian
//! parameter payload in manifest order.

use std::path::Path;

use bridging_autodiff::Real;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::config::ModelConfig;
use crate::error::{BridgingError, Result};
use crate::model::{CharVocab, Model};

pub const FORMAT_VERSION: u32 = 1;
const FORMAT: &str = "bridging-checkpoint";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    dtype: String,
    model: ModelConfig,
    chars: CharVocab,
    /// Caller-supplied provenance (run configuration, seed, epoch).
    meta: Value,
    params: Vec<Entry>,
    payload_bytes: usize,
    sha256: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

/// A loaded model and the metadata it was saved with.
#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub model: Model<T>,
    pub meta: Value,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn save_checkpoint<T: Real>(
    path: impl AsRef<Path>,
    model: &Model<T>,
    meta: &Value,
) -> Result<()> {
    let path = path.as_ref();
    let mut payload = Vec::with_capacity(model.params.num_values() * T::BYTES);
    let mut params = Vec::with_capacity(model.params.len());
    for (_, p) in model.params.iter() {
        params.push(Entry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            offset: payload.len(),
        });
        p.value
            .data()
            .iter()
            .for_each(|&v| v.write_le(&mut payload));
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: FORMAT_VERSION,
        dtype: T::DTYPE.into(),
        model: model.config.clone(),
        chars: model.chars.clone(),
        meta: meta.clone(),
        params,
        payload_bytes: payload.len(),
        sha256: hex(&Sha256::digest(&payload)),
    };
    let mut bytes =
        serde_json::to_vec(&manifest).map_err(|e| BridgingError::Checkpoint(e.to_string()))?;
    bytes.push(b'\n');
    bytes.extend_from_slice(&payload);
    std::fs::write(path, bytes).map_err(|e| BridgingError::io(path, e))
}

pub fn load_checkpoint<T: Real>(path: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    load(path.as_ref(), None)
}

/// Like [`load_checkpoint`], but first requires the stored model
/// configuration to equal `expected`, naming the first differing field.
pub fn load_checkpoint_expecting<T: Real>(
    path: impl AsRef<Path>,
    expected: &ModelConfig,
) -> Result<Checkpoint<T>> {
    load(path.as_ref(), Some(expected))
}

fn load<T: Real>(path: &Path, expected: Option<&ModelConfig>) -> Result<Checkpoint<T>> {
    let fail = |m: String| BridgingError::Checkpoint(format!("{}: {m}", path.display()));
    let bytes = std::fs::read(path).map_err(|e| BridgingError::io(path, e))?;
    let split = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| fail("missing manifest line".into()))?;
    let header: Value = serde_json::from_slice(&bytes[..split])
        .map_err(|e| fail(format!("unreadable manifest: {e}")))?;
    if header.get("format").and_then(Value::as_str) != Some(FORMAT) {
        return Err(fail("not a checkpoint file".into()));
    }
    match header.get("version").and_then(Value::as_u64) {
        Some(v) if v == u64::from(FORMAT_VERSION) => {}
        Some(v) => {
            return Err(fail(format!(
                "format version {v} is not supported (expected {FORMAT_VERSION})"
            )))
        }
        None => return Err(fail("manifest has no format version".into())),
    }
    let manifest: Manifest =
        serde_json::from_value(header).map_err(|e| fail(format!("invalid manifest: {e}")))?;
    if manifest.dtype != T::DTYPE {
        return Err(fail(format!(
            "stored as {}, requested {}",
            manifest.dtype,
            T::DTYPE
        )));
    }
    if let Some(expected) = expected {
        config_mismatch(expected, &manifest.model)?;
    }

    let payload = &bytes[split + 1..];
    if payload.len() < manifest.payload_bytes {
        return Err(fail(format!(
            "truncated: payload has {} of {} bytes",
            payload.len(),
            manifest.payload_bytes
        )));
    }
    if payload.len() > manifest.payload_bytes {
        return Err(fail(format!(
            "{} trailing bytes after the payload",
            payload.len() - manifest.payload_bytes
        )));
    }
    if hex(&Sha256::digest(payload)) != manifest.sha256 {
        return Err(fail("payload checksum mismatch (file corrupted)".into()));
    }

    let mut model = Model::<T>::zeroed(manifest.model, manifest.chars)?;
    if model.params.len() != manifest.params.len() {
        return Err(fail(format!(
            "file holds {} parameters, the configured model has {}",
            manifest.params.len(),
            model.params.len()
        )));
    }
    for (p, entry) in model.params.iter_mut().zip(&manifest.params) {
        if p.name != entry.name {
            return Err(fail(format!(
                "expected parameter `{}`, found `{}`",
                p.name, entry.name
            )));
        }
        if p.value.shape() != entry.shape.as_slice() {
            return Err(fail(format!(
                "parameter `{}` has shape {:?} in the file but {:?} in the model",
                p.name,
                entry.shape,
                p.value.shape()
            )));
        }
        let end = entry.offset + p.value.len() * T::BYTES;
        let chunk = payload
            .get(entry.offset..end)
            .ok_or_else(|| fail(format!("parameter `{}` runs past the payload", p.name)))?;
        for (v, raw) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(chunk.chunks_exact(T::BYTES))
        {
            *v = T::read_le(raw);
        }
    }
    Ok(Checkpoint {
        model,
        meta: manifest.meta,
    })
}

fn config_mismatch(expected: &ModelConfig, found: &ModelConfig) -> Result<()> {
    let to_value = |c: &ModelConfig| {
        serde_json::to_value(c).map_err(|e| BridgingError::Checkpoint(e.to_string()))
    };
    match first_difference(&to_value(expected)?, &to_value(found)?, String::new()) {
        Some((field, expected, found)) => Err(BridgingError::ConfigMismatch {
            field,
            expected,
            found,
        }),
        None => Ok(()),
    }
}

fn first_difference(a: &Value, b: &Value, path: String) -> Option<(String, String, String)> {
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => x.iter().find_map(|(k, va)| {
            let field = if path.is_empty() {
                k.clone()
            } else {
                format!("{path}.{k}")
            };
            match y.get(k) {
                Some(vb) => first_difference(va, vb, field),
                None => Some((field, va.to_string(), "nothing".into())),
            }
        }),
        _ if a == b => None,
        _ => Some((path, a.to_string(), b.to_string())),
    }
}
