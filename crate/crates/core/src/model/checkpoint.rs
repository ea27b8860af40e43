//! Single-file checkpoint archive.
//!
//! Layout: the 8-byte magic `CODCKPT1`, a little-endian `u64` manifest
//! length, the JSON manifest, then every tensor as little-endian `f32` at the
//! byte offset (relative to the start of the tensor section) recorded in the
//! manifest.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::DetectorConfig;
use super::detector::{Detector, NamedLayer, Scope};
use crate::error::{Error, IoContext, Result};

const MAGIC: &[u8; 8] = b"CODCKPT1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub len: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub config: DetectorConfig,
    pub layers: Vec<NamedLayer>,
    pub seed: u64,
    pub tensors: Vec<TensorEntry>,
}

pub fn to_bytes(model: &Detector) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    for p in model.params() {
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.shape.clone(),
            offset: payload.len() as u64,
            len: p.value.len() as u64,
        });
        for v in &p.value {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = CheckpointManifest {
        config: model.config().clone(),
        layers: model.layer_inventory(&Scope::ALL),
        seed: model.seed(),
        tensors,
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(16 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn read_manifest(bytes: &[u8]) -> Result<(CheckpointManifest, &[u8])> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Structural("not a checkpoint archive".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let json = bytes
        .get(16..16 + len)
        .ok_or_else(|| Error::Structural("truncated checkpoint manifest".into()))?;
    Ok((serde_json::from_slice(json)?, &bytes[16 + len..]))
}

pub fn from_bytes(bytes: &[u8]) -> Result<Detector> {
    let (manifest, payload) = read_manifest(bytes)?;
    let mut model = Detector::new(manifest.config.clone(), manifest.seed)?;
    if model.layer_inventory(&Scope::ALL) != manifest.layers {
        return Err(Error::Structural(
            "checkpoint layer inventory does not match its config".into(),
        ));
    }
    for entry in &manifest.tensors {
        let param = model
            .param_mut(&entry.name)
            .ok_or_else(|| Error::Structural(format!("unknown tensor `{}`", entry.name)))?;
        if param.shape != entry.shape || param.value.len() as u64 != entry.len {
            return Err(Error::Structural(format!(
                "shape mismatch for tensor `{}`",
                entry.name
            )));
        }
        let start = entry.offset as usize;
        let raw = payload
            .get(start..start + 4 * entry.len as usize)
            .ok_or_else(|| Error::Structural(format!("truncated tensor `{}`", entry.name)))?;
        for (v, chunk) in param.value.iter_mut().zip(raw.chunks_exact(4)) {
            *v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        }
    }
    Ok(model)
}

pub fn save(model: &Detector, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(model)?).at(path)
}

pub fn load(path: &Path) -> Result<Detector> {
    from_bytes(&fs::read(path).at(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_weights_and_manifest_fields() {
        let mut model = Detector::new(DetectorConfig::default(), 5).unwrap();
        model.param_mut("head.cls.0.bias").unwrap().value[0] = 1.25;
        let bytes = to_bytes(&model).unwrap();
        let (manifest, _) = read_manifest(&bytes).unwrap();
        let json: serde_json::Value =
            serde_json::to_value(&manifest).unwrap();
        for key in ["config", "layers", "seed", "tensors"] {
            assert!(json.get(key).is_some(), "missing {key}");
        }
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back.snapshot(), model.snapshot());
    }

    #[test]
    fn rejects_garbage() {
        assert!(matches!(from_bytes(b"nope"), Err(Error::Structural(_))));
    }
}
