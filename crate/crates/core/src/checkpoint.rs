//! Checkpoint directories: `checkpoint.json` (metadata and parameter index)
//! plus `tensors.bin` (little-endian f32, concatenated in index order).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoders::{ModelConfig, NamedParams};
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const TENSORS_FILE: &str = "tensors.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub file: String,
    /// Byte offset into `file`.
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub schema_version: u32,
    pub config_hash: String,
    /// 1-based domain step; 0 for weights not tied to a run.
    pub step: usize,
    pub method: String,
    pub model: ModelConfig,
    /// SHA-256 of `tensors.bin`.
    pub tensors_sha256: String,
    /// Sorted by name, which is also the order in `tensors.bin`.
    pub parameters: BTreeMap<String, TensorEntry>,
}

#[derive(Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: BTreeMap<String, Tensor>,
}

/// Identity of a checkpoint: everything in the metadata except the parameters.
#[derive(Debug, Clone)]
pub struct CheckpointHeader {
    pub config_hash: String,
    pub step: usize,
    pub method: String,
    pub model: ModelConfig,
}

/// Writes `tensors` into `dir`; returns the tensor-file digest.
pub fn save_checkpoint(
    dir: &Path,
    header: &CheckpointHeader,
    tensors: &[(String, Tensor)],
) -> Result<String> {
    fs::create_dir_all(dir)?;
    let sorted: BTreeMap<&str, &Tensor> = tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
    if sorted.len() != tensors.len() {
        return Err(Error::InvalidArgument("duplicate parameter names".into()));
    }
    let mut bytes: Vec<u8> = Vec::new();
    let mut parameters = BTreeMap::new();
    for (name, tensor) in sorted {
        let values = tensor
            .to_dtype(DType::F32)?
            .flatten_all()?
            .to_vec1::<f32>()?;
        parameters.insert(
            name.to_string(),
            TensorEntry {
                shape: tensor.dims().to_vec(),
                dtype: "f32".into(),
                file: TENSORS_FILE.into(),
                offset: bytes.len() as u64,
            },
        );
        for v in values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = hex::encode(Sha256::digest(&bytes));
    let meta = CheckpointMeta {
        schema_version: SCHEMA_VERSION,
        config_hash: header.config_hash.clone(),
        step: header.step,
        method: header.method.clone(),
        model: header.model.clone(),
        tensors_sha256: digest.clone(),
        parameters,
    };
    fs::write(dir.join(TENSORS_FILE), &bytes)?;
    fs::write(
        dir.join(CHECKPOINT_FILE),
        serde_json::to_string_pretty(&meta)?,
    )?;
    Ok(digest)
}

pub fn read_meta(dir: &Path) -> Result<CheckpointMeta> {
    let path = dir.join(CHECKPOINT_FILE);
    let text = fs::read_to_string(&path).map_err(|_| Error::MissingFile(path.clone()))?;
    let raw: serde_json::Value = serde_json::from_str(&text)?;
    let version = raw.get("schema_version").and_then(|v| v.as_u64());
    if version != Some(SCHEMA_VERSION as u64) {
        return Err(Error::VersionMismatch(format!(
            "{} has schema {version:?}, expected {SCHEMA_VERSION}",
            path.display()
        )));
    }
    serde_json::from_value(raw).map_err(|e| Error::VersionMismatch(e.to_string()))
}

/// Loads and verifies a checkpoint. A digest mismatch is an integrity error.
pub fn load_checkpoint(dir: &Path, device: &Device) -> Result<Checkpoint> {
    let meta = read_meta(dir)?;
    let path = dir.join(TENSORS_FILE);
    let bytes = fs::read(&path).map_err(|_| Error::MissingFile(path.clone()))?;
    let digest = hex::encode(Sha256::digest(&bytes));
    if digest != meta.tensors_sha256 {
        return Err(Error::Integrity(format!(
            "{} digest {digest} does not match recorded {}",
            path.display(),
            meta.tensors_sha256
        )));
    }
    let mut tensors = BTreeMap::new();
    for (name, entry) in &meta.parameters {
        if entry.dtype != "f32" || entry.file != TENSORS_FILE {
            return Err(Error::VersionMismatch(format!(
                "{name}: unsupported storage {} in {}",
                entry.dtype, entry.file
            )));
        }
        let count: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + 4 * count;
        let chunk = bytes.get(start..end).ok_or_else(|| {
            Error::Integrity(format!("{name}: range {start}..{end} out of bounds"))
        })?;
        let values: Vec<f32> = chunk
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        tensors.insert(
            name.clone(),
            Tensor::from_vec(values, entry.shape.as_slice(), device)?,
        );
    }
    Ok(Checkpoint { meta, tensors })
}

/// Copies every tensor named in `params` from `tensors` into its variable.
/// Names missing from `tensors` are an error when `strict`.
pub fn assign_named(
    params: &NamedParams<'_>,
    tensors: &BTreeMap<String, Tensor>,
    strict: bool,
) -> Result<usize> {
    let mut assigned = 0;
    for (name, var) in params {
        let Some(t) = tensors.get(name) else {
            if strict {
                return Err(Error::Key(format!("checkpoint lacks `{name}`")));
            }
            continue;
        };
        if t.dims() != var.dims() {
            return Err(Error::Shape(format!(
                "{name}: checkpoint {:?} vs model {:?}",
                t.dims(),
                var.dims()
            )));
        }
        var.set(&t.to_dtype(var.dtype())?)?;
        assigned += 1;
    }
    Ok(assigned)
}

/// SHA-256 over the f32 little-endian bytes of `params`, in the given order.
pub fn params_digest(params: &NamedParams<'_>) -> Result<String> {
    let mut hasher = Sha256::new();
    for (name, var) in params {
        hasher.update(name.as_bytes());
        let values = var
            .as_tensor()
            .to_dtype(DType::F32)?
            .flatten_all()?
            .to_vec1::<f32>()?;
        for v in values {
            hasher.update(v.to_le_bytes());
        }
    }
    Ok(hex::encode(hasher.finalize()))
}
