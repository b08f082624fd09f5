//! Versioned JSON containers for trained models. Loading re-validates the
//! parameter layout against the stored config, so a checkpoint that
//! deserializes is a checkpoint the forward passes can run.

use crate::model::{check_params, ModelConfig, ModelError, ModelKind};
use crate::params::ModelParams;
use crate::vocab::Vocab;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported checkpoint version {found} (this build reads {expected})")]
    Version { found: u32, expected: u32 },
    #[error("vocabulary has {vocab} tokens but config expects {expected}")]
    VocabSize { vocab: usize, expected: usize },
    #[error("non-finite value in parameter tensor {0:?}")]
    NonFinite(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub kind: ModelKind,
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub params: ModelParams,
}

impl Checkpoint {
    pub fn new(kind: ModelKind, config: ModelConfig, vocab: Vocab, params: ModelParams) -> Self {
        Checkpoint { version: CHECKPOINT_VERSION, kind, config, vocab, params }
    }

    pub fn validate(&self) -> Result<(), CheckpointError> {
        if self.version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version {
                found: self.version,
                expected: CHECKPOINT_VERSION,
            });
        }
        self.config.validate()?;
        if self.vocab.len() != self.config.vocab_size {
            return Err(CheckpointError::VocabSize {
                vocab: self.vocab.len(),
                expected: self.config.vocab_size,
            });
        }
        check_params(self.kind, &self.config, &self.params)?;
        for (name, t) in self.params.iter() {
            if !t.is_finite() {
                return Err(CheckpointError::NonFinite(name.to_string()));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        self.validate()?;
        let json = serde_json::to_string(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let json = std::fs::read_to_string(path)?;
        let ckpt: Checkpoint = serde_json::from_str(&json)?;
        ckpt.validate()?;
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Checkpoint {
        let vocab = Vocab::build(["tiny corpus for the checkpoint test one two three four"].iter().copied());
        let cfg = ModelConfig {
            vocab_size: vocab.len(),
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            max_positions: 12,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let params = init_params(ModelKind::Classifier, &cfg, &mut rng).unwrap();
        Checkpoint::new(ModelKind::Classifier, cfg, vocab, params)
    }

    #[test]
    fn save_load_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("victim.json");
        let ckpt = sample();
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.params, ckpt.params);
        assert_eq!(back.config, ckpt.config);
        assert_eq!(back.vocab.tokens(), ckpt.vocab.tokens());
    }

    #[test]
    fn wrong_version_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v9.json");
        let mut ckpt = sample();
        ckpt.version = 9;
        let json = serde_json::to_string(&ckpt).unwrap();
        std::fs::write(&path, json).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(CheckpointError::Version { found: 9, .. })));
    }

    #[test]
    fn layout_drift_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        let mut ckpt = sample();
        let d = ckpt.config.d_model;
        *ckpt.params.get_mut("pooler.weight").unwrap() = Tensor::zeros(vec![d, d + 1]);
        let json = serde_json::to_string(&ckpt).unwrap();
        std::fs::write(&path, json).unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }

    #[test]
    fn vocab_size_mismatch_rejected() {
        let mut ckpt = sample();
        ckpt.config.vocab_size += 1;
        assert!(matches!(ckpt.validate(), Err(CheckpointError::VocabSize { .. })));
    }
}
