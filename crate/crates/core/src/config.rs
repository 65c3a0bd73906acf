//! Run configuration: one TOML document with a section per stage. Every field
//! has a default, unknown keys are rejected, and the hash is taken over the
//! parsed values so it does not depend on key order or formatting.
//!
//! ```toml
//! [model]
//! d_model = 32
//!
//! [train]
//! learning_rate = 0.02
//!
//! [experiment]
//! expert_seeds = [0, 1, 2]
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapt::CemConfig;
use crate::analysis::AblationConfig;
use crate::error::{Error, Result};
use crate::hashing::json_hash;
use crate::lora::LoraConfig;
use crate::model::ModelConfig;
use crate::tasks::{Family, SplitSizes};
use crate::train::{PretrainConfig, TrainConfig};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    /// Seed of the task generators (shared by every model and expert).
    pub data_seed: u64,
    pub sizes: SplitSizes,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    /// Dispatch examples per category drawn from the train portions.
    pub per_class: usize,
    /// Dispatch examples per category drawn from the validation portions.
    pub validation_per_class: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            per_class: 256,
            validation_per_class: 128,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSection {
    pub train_family: Family,
    pub unseen_family: Family,
    pub lora_train: TrainConfig,
    pub lora_learning_rates: Vec<f64>,
}

impl Default for AblationSection {
    fn default() -> Self {
        let d = AblationConfig::default();
        Self {
            train_family: Family::Mod10Add,
            unseen_family: Family::Mod10Add3Op,
            lora_train: TrainConfig {
                learning_rate: 2e-3,
                batch_size: 32,
                clip_max_norm: 1.0,
                max_epochs: 20,
                ..TrainConfig::default()
            },
            lora_learning_rates: d.lora_learning_rates,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Pretraining seed of the main base model.
    pub base_seed: u64,
    /// Pretraining seed of the second model used for transfer.
    pub transfer_base_seed: u64,
    pub expert_seeds: Vec<u64>,
    pub shuffle_seeds: Vec<u64>,
    pub cem_seed: u64,
    /// Holdout sizes compared in the few-shot sample-count study.
    pub few_shot_counts: Vec<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            base_seed: 0,
            transfer_base_seed: 1,
            expert_seeds: vec![0, 1, 2],
            shuffle_seeds: vec![0, 1, 2, 3, 4],
            cem_seed: 0,
            few_shot_counts: vec![3, 10],
        }
    }
}

/// The reference configuration is the default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub task: TaskConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub classifier: ClassifierConfig,
    pub cem: CemConfig,
    pub lora: LoraConfig,
    pub ablation: AblationSection,
    pub experiment: ExperimentConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            task: TaskConfig::default(),
            pretrain: PretrainConfig::default(),
            train: TrainConfig {
                learning_rate: 2e-2,
                batch_size: 32,
                max_epochs: 40,
                ..TrainConfig::default()
            },
            classifier: ClassifierConfig::default(),
            cem: CemConfig::default(),
            lora: LoraConfig::default(),
            ablation: AblationSection::default(),
            experiment: ExperimentConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(s).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.ablation.lora_train.validate()?;
        self.cem.validate()?;
        if self.experiment.expert_seeds.is_empty() {
            return Err(Error::Config("expert_seeds must not be empty".into()));
        }
        if self.pretrain.band_lo > self.pretrain.band_hi {
            return Err(Error::Config("band_lo exceeds band_hi".into()));
        }
        Ok(())
    }

    /// Hash of the parsed configuration.
    pub fn hash(&self) -> String {
        json_hash(self)
    }

    pub fn ablation_config(&self, seed: u64) -> AblationConfig {
        AblationConfig {
            svf: self.train.clone(),
            lora: self.lora.clone(),
            lora_train: self.ablation.lora_train.clone(),
            lora_learning_rates: self.ablation.lora_learning_rates.clone(),
            seed,
        }
    }
}
