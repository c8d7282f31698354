//! Model weight files.
//!
//! Layout: an 8-byte little-endian length, a JSON header of that length
//! describing the config and the tensor manifest, then the payload of
//! concatenated row-major little-endian `f64` tensors. Manifest offsets must
//! be contiguous and cover the payload exactly; save/load round-trips are
//! byte-identical.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use specattn_core::model::{Model, ModelConfig};
use specattn_core::tensor::Tensor2D;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct WeightHeader {
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    let mut entries = Vec::new();
    let mut payload = Vec::new();
    for (name, tensor) in model.named_tensors() {
        entries.push(TensorEntry {
            name,
            rows: tensor.rows(),
            cols: tensor.cols(),
            offset: payload.len() as u64,
        });
        for &x in tensor.data() {
            payload.extend_from_slice(&x.to_le_bytes());
        }
    }
    let header = serde_json::to_vec(&WeightHeader {
        config: model.config,
        tensors: entries,
    })?;
    let mut bytes = Vec::with_capacity(8 + header.len() + payload.len());
    bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header);
    bytes.extend_from_slice(&payload);
    fs::write(path, bytes).with_context(|| format!("writing weights to {}", path.display()))?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<Model> {
    let bytes =
        fs::read(path).with_context(|| format!("reading weights from {}", path.display()))?;
    if bytes.len() < 8 {
        bail!("weight file too short for its header length field");
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    let Some(header_bytes) = bytes.get(8..8 + header_len) else {
        bail!("truncated header: declared {header_len} bytes");
    };
    let header: WeightHeader =
        serde_json::from_slice(header_bytes).context("parsing weight-file header")?;
    header
        .config
        .validate()
        .map_err(|e| anyhow::anyhow!("invalid config in weight file: {e}"))?;
    let payload = &bytes[8 + header_len..];

    // Offsets must tile the payload exactly: contiguous, non-overlapping,
    // nothing left over.
    let mut expected_offset = 0_u64;
    for entry in &header.tensors {
        if entry.offset != expected_offset {
            bail!(
                "corrupted manifest: tensor {} at offset {}, expected {expected_offset}",
                entry.name,
                entry.offset
            );
        }
        expected_offset += (entry.rows * entry.cols * 8) as u64;
    }
    if expected_offset != payload.len() as u64 {
        bail!(
            "truncated payload: manifest covers {expected_offset} bytes, file holds {}",
            payload.len()
        );
    }

    let mut tensors = BTreeMap::new();
    for entry in &header.tensors {
        let start = entry.offset as usize;
        let count = entry.rows * entry.cols;
        let data: Vec<f64> = payload[start..start + count * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor2D::from_vec(entry.rows, entry.cols, data)
            .map_err(|e| anyhow::anyhow!("tensor {}: {e}", entry.name))?;
        if tensors.insert(entry.name.clone(), tensor).is_some() {
            bail!("duplicate tensor {} in manifest", entry.name);
        }
    }
    Model::from_named_tensors(header.config, tensors)
        .map_err(|e| anyhow::anyhow!("weight file does not match its config: {e}"))
}

/// Loads and additionally checks the file was written for `expected`.
pub fn load_model_expecting(path: &Path, expected: &ModelConfig) -> Result<Model> {
    let model = load_model(path)?;
    if model.config != *expected {
        bail!("config mismatch: weight file holds a different model shape or seed");
    }
    Ok(model)
}
