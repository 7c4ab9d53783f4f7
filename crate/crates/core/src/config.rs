//! Experiment configuration files.
//!
//! Every field is required when parsing, so a stored file pins every seed
//! and hyperparameter; unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::VOCAB_SIZE;
use crate::error::{Error, Result};
use crate::importance::ImportanceMethod;
use crate::model::ModelConfig;
use crate::train::{Schedule, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Projected compression.
    Pc,
    /// Hard pruning with retraining.
    Hpr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImportanceKind {
    Magnitude,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub paths: Vec<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompressConfig {
    pub method: Method,
    pub level: f64,
    pub residual: bool,
    pub importance: ImportanceKind,
    pub importance_seed: u64,
}

impl CompressConfig {
    pub fn importance_method(&self) -> ImportanceMethod {
        match self.importance {
            ImportanceKind::Magnitude => ImportanceMethod::Magnitude,
            ImportanceKind::Random => ImportanceMethod::Random {
                seed: self.importance_seed,
            },
        }
    }
}

/// Parameters of the pretrain, compress and compare protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolConfig {
    /// Pretraining tokens per model parameter, ascending. Base models for
    /// all ratios are snapshots of one pretraining run.
    pub token_ratios: Vec<u64>,
    /// Retraining step counts for the paired arms.
    pub budgets: Vec<usize>,
    /// Step count of the importance ablation grid.
    pub ablation_budget: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub init_seed: u64,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub pretrain: TrainConfig,
    pub compress: CompressConfig,
    pub train: TrainConfig,
    pub protocol: ProtocolConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.pretrain.validate()?;
        self.train.validate()?;
        if self.model.vocab_size != VOCAB_SIZE {
            return Err(Error::Config(format!(
                "byte-level data needs vocab_size {VOCAB_SIZE}, got {}",
                self.model.vocab_size
            )));
        }
        for (name, t) in [("pretrain", &self.pretrain), ("train", &self.train)] {
            if t.seq_len > self.model.seq_len {
                return Err(Error::Config(format!(
                    "{name}.seq_len {} exceeds model.seq_len {}",
                    t.seq_len, self.model.seq_len
                )));
            }
        }
        if !(self.compress.level > 0.0 && self.compress.level < 1.0) {
            return Err(Error::Config("compress.level must lie in (0, 1)".into()));
        }
        let p = &self.protocol;
        if p.token_ratios.is_empty()
            || p.token_ratios.windows(2).any(|w| w[0] >= w[1])
            || p.token_ratios[0] == 0
        {
            return Err(Error::Config(
                "protocol.token_ratios must be positive and ascending".into(),
            ));
        }
        if p.budgets.is_empty() || p.budgets.contains(&0) || p.ablation_budget == 0 {
            return Err(Error::Config("protocol budgets must be positive".into()));
        }
        Ok(())
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let c: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&s)
    }

    /// Desk-scale profile: a ~1M-parameter byte-level model.
    pub fn desk() -> Self {
        let model = ModelConfig {
            n_layers: 5,
            n_heads: 4,
            d_model: 128,
            d_ff: 512,
            vocab_size: VOCAB_SIZE,
            seq_len: 64,
            layer_norm_eps: 1e-5,
            tied_embeddings: true,
        };
        let pretrain = TrainConfig {
            steps: 1,
            batch_size: 16,
            seq_len: 64,
            learning_rate: 2e-3,
            warmup_steps: 200,
            schedule: Schedule::Constant,
            min_lr_ratio: 1.0,
            seed: 1,
            ..TrainConfig::default()
        };
        let train = TrainConfig {
            steps: 1000,
            batch_size: 16,
            seq_len: 64,
            learning_rate: 1e-3,
            warmup_steps: 50,
            schedule: Schedule::Cosine,
            min_lr_ratio: 0.1,
            seed: 2,
            ..TrainConfig::default()
        };
        Self {
            init_seed: 0,
            model,
            data: DataConfig {
                paths: vec![PathBuf::from("data/sonnets.txt")],
            },
            pretrain,
            compress: CompressConfig {
                method: Method::Pc,
                level: 0.5,
                residual: true,
                importance: ImportanceKind::Magnitude,
                importance_seed: 7,
            },
            train,
            protocol: ProtocolConfig {
                token_ratios: vec![20, 80],
                budgets: vec![250, 500, 1000],
                ablation_budget: 500,
            },
        }
    }

    /// Reduced profile with the same protocol, sized for a test run.
    pub fn smoke() -> Self {
        let mut c = Self::desk();
        c.model = ModelConfig {
            n_layers: 2,
            n_heads: 4,
            d_model: 32,
            d_ff: 128,
            seq_len: 32,
            ..c.model
        };
        c.pretrain.batch_size = 16;
        c.pretrain.seq_len = 32;
        c.pretrain.warmup_steps = 50;
        c.pretrain.learning_rate = 3e-3;
        c.train.batch_size = 16;
        c.train.seq_len = 32;
        c.train.warmup_steps = 20;
        c.train.learning_rate = 2e-3;
        c.protocol.budgets = vec![150, 300, 600];
        c.protocol.ablation_budget = 150;
        c
    }
}
