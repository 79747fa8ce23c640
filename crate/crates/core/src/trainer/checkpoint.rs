//! Checkpoint files: JSON documents holding the full configuration snapshot
//! and every named interaction tensor. A checkpoint's identity is the SHA-256
//! of its bytes.

use std::fs;
use std::path::Path;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::TrainConfig;
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::interaction::{InteractionDims, InteractionWeights};

pub const CHECKPOINT_FORMAT: &str = "mimic-checkpoint-v1";

/// Everything needed to rebuild the model a checkpoint belongs to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
}

impl ModelConfig {
    pub fn dims(&self) -> InteractionDims {
        InteractionDims {
            text_dim: self.encoder.text_dim,
            image_dim: self.encoder.image_dim,
            tglu_dim: self.train.tglu_dim,
            cmfu_dim: self.train.cmfu_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    epoch: usize,
    config: ModelConfig,
    tensors: Vec<NamedTensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub epoch: usize,
    pub config: ModelConfig,
    pub weights: InteractionWeights,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.into(),
            epoch: self.epoch,
            config: self.config.clone(),
            tensors: self
                .weights
                .tensors()
                .into_iter()
                .map(|(name, t)| NamedTensor {
                    name: name.into(),
                    shape: t.shape().to_vec(),
                    data: t.iter().copied().collect(),
                })
                .collect(),
        };
        serde_json::to_vec(&file).expect("checkpoint serializes")
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let file: CheckpointFile =
            serde_json::from_slice(bytes).map_err(|e| Error::Checkpoint(format!("malformed checkpoint: {e}")))?;
        if file.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint format `{}`",
                file.format
            )));
        }
        let dims = file.config.dims();
        dims.validate()?;
        let mut weights = InteractionWeights::zeros(dims);
        let mut slots = weights.tensors_mut();
        if slots.len() != file.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                slots.len(),
                file.tensors.len()
            )));
        }
        for ((name, slot), t) in slots.iter_mut().zip(&file.tensors) {
            if *name != t.name || slot.shape() != t.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` {:?} does not match expected `{name}` {:?}",
                    t.name,
                    t.shape,
                    slot.shape()
                )));
            }
            let arr = ArrayD::from_shape_vec(t.shape.clone(), t.data.clone())
                .map_err(|e| Error::Checkpoint(format!("tensor `{}`: {e}", t.name)))?;
            slot.assign(&arr);
        }
        drop(slots);
        Ok(Self {
            epoch: file.epoch,
            config: file.config,
            weights,
        })
    }

    /// Writes the checkpoint and returns its hash.
    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes();
        fs::write(path, &bytes).map_err(|e| Error::io(format!("writing checkpoint {}", path.display()), e))?;
        Ok(sha256_hex(&bytes))
    }

    /// Reads a checkpoint together with its hash.
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let bytes = fs::read(path).map_err(|e| Error::io(format!("reading checkpoint {}", path.display()), e))?;
        let ckpt = Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })?;
        Ok((ckpt, sha256_hex(&bytes)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let encoder = EncoderConfig {
            text_dim: 8,
            image_dim: 6,
            ..EncoderConfig::default()
        };
        let train = TrainConfig {
            tglu_dim: 4,
            cmfu_dim: 4,
            ..TrainConfig::default()
        };
        let config = ModelConfig { encoder, train };
        let weights = InteractionWeights::init(config.dims(), 11);
        Checkpoint {
            epoch: 3,
            config,
            weights,
        }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let c = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.ckpt");
        let h1 = c.save(&path).unwrap();
        let (back, h2) = Checkpoint::load(&path).unwrap();
        assert_eq!(back, c);
        assert_eq!(h1, h2);
        assert_eq!(back.to_bytes(), c.to_bytes());
    }

    #[test]
    fn hash_changes_with_weights() {
        let a = sample();
        let mut b = sample();
        b.weights.tglu.query[[0, 0]] += 1e-12;
        assert_ne!(sha256_hex(&a.to_bytes()), sha256_hex(&b.to_bytes()));
    }

    #[test]
    fn corrupt_files_are_rejected() {
        assert!(Checkpoint::from_bytes(b"{}").is_err());
        let mut v: serde_json::Value = serde_json::from_slice(&sample().to_bytes()).unwrap();
        v["tensors"][0]["shape"] = serde_json::json!([1, 1]);
        assert!(Checkpoint::from_bytes(&serde_json::to_vec(&v).unwrap()).is_err());
        let mut v: serde_json::Value = serde_json::from_slice(&sample().to_bytes()).unwrap();
        v["format"] = "other".into();
        assert!(Checkpoint::from_bytes(&serde_json::to_vec(&v).unwrap()).is_err());
    }
}
