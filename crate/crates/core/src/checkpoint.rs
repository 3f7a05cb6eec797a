//! Checkpoint files.
//!
//! A checkpoint is one JSON manifest carrying a format version, the model
//! config, a SHA-256 content checksum, and per parameter its name, shape and
//! a base64 blob of little-endian IEEE-754 `f64` values.

use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{ModelConfig, ModelError, ParameterStore};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint manifest: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported checkpoint format version {0}")]
    Version(u32),
    #[error("parameter `{0}`: invalid value blob")]
    Blob(String),
    #[error("checksum mismatch: manifest says {expected}, content hashes to {actual}")]
    Checksum { expected: String, actual: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ParameterEntry {
    name: String,
    shape: Vec<usize>,
    data: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    model_config: ModelConfig,
    checksum: String,
    parameters: Vec<ParameterEntry>,
}

/// A model config together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParameterStore,
}

fn le_bytes(t: &Tensor) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// SHA-256 over the config and every parameter's name, shape and values.
pub fn content_checksum(config: &ModelConfig, params: &ParameterStore) -> String {
    let mut hasher = Sha256::new();
    hasher.update(serde_json::to_vec(config).expect("config serializes"));
    for (name, t) in params.iter() {
        hasher.update(name.as_bytes());
        hasher.update([0u8]);
        for &dim in t.shape() {
            hasher.update((dim as u64).to_le_bytes());
        }
        hasher.update(le_bytes(t));
    }
    let digest = hasher.finalize();
    let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
    format!("sha256:{hex}")
}

impl Checkpoint {
    pub fn new(config: ModelConfig, params: ParameterStore) -> Result<Self, CheckpointError> {
        params.check(&config)?;
        Ok(Checkpoint { config, params })
    }

    pub fn checksum(&self) -> String {
        content_checksum(&self.config, &self.params)
    }

    pub fn to_json(&self) -> Result<String, CheckpointError> {
        let parameters = self
            .params
            .iter()
            .map(|(name, t)| ParameterEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                data: STANDARD.encode(le_bytes(t)),
            })
            .collect();
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            model_config: self.config.clone(),
            checksum: self.checksum(),
            parameters,
        };
        Ok(serde_json::to_string_pretty(&manifest)?)
    }

    pub fn from_json(text: &str) -> Result<Self, CheckpointError> {
        let manifest: Manifest = serde_json::from_str(text)?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(CheckpointError::Version(manifest.format_version));
        }
        let mut params = ParameterStore::from_map(Default::default());
        for entry in manifest.parameters {
            let bytes = STANDARD
                .decode(&entry.data)
                .map_err(|_| CheckpointError::Blob(entry.name.clone()))?;
            if bytes.len() % 8 != 0 {
                return Err(CheckpointError::Blob(entry.name));
            }
            let values = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let t = Tensor::new(entry.shape, values)
                .map_err(|_| CheckpointError::Blob(entry.name.clone()))?;
            params.insert(entry.name, t);
        }
        let actual = content_checksum(&manifest.model_config, &params);
        if actual != manifest.checksum {
            return Err(CheckpointError::Checksum {
                expected: manifest.checksum,
                actual,
            });
        }
        Checkpoint::new(manifest.model_config, params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        Checkpoint::from_json(&fs::read_to_string(path)?)
    }
}
