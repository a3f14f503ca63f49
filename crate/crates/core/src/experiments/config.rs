use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::models::ModelSpec;
use crate::optim::OptimizerConfig;
use crate::randomout::RandomOutConfig;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum DatasetSpec {
    Synth {
        n_pos: usize,
        n_neg: usize,
        seed: u64,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
        #[serde(default)]
        split_seed: u64,
    },
    Cifar10 {
        path: PathBuf,
        max_per_class: usize,
        #[serde(default)]
        split_seed: u64,
    },
}

impl DatasetSpec {
    pub fn synth(n_pos: usize, n_neg: usize, seed: u64) -> Self {
        DatasetSpec::Synth { n_pos, n_neg, seed }
    }

    /// Loads the dataset and splits it 50/50 into `(train, test)`.
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        let (full, split_seed) = match self {
            DatasetSpec::Synth { n_pos, n_neg, seed } => (data::synth_craters(*n_pos, *n_neg, *seed)?, *seed),
            DatasetSpec::Idx {
                images,
                labels,
                split_seed,
            } => (data::load_idx(images, labels)?, *split_seed),
            DatasetSpec::Cifar10 {
                path,
                max_per_class,
                split_seed,
            } => (data::load_cifar10_binary(path, *max_per_class)?, *split_seed),
        };
        data::split_50_50(&full, split_seed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Base,
    #[serde(rename = "randomout")]
    RandomOut,
    Batchnorm,
}

impl std::fmt::Display for Condition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Condition::Base => "base",
            Condition::RandomOut => "randomout",
            Condition::Batchnorm => "batchnorm",
        })
    }
}

pub const DEFAULT_TELEMETRY_TAU: f64 = 1e-8;

fn default_telemetry_tau() -> f64 {
    DEFAULT_TELEMETRY_TAU
}

/// Everything that determines a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelSpec,
    pub dataset: DatasetSpec,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub randomout: Option<RandomOutConfig>,
    pub condition: Condition,
    /// Threshold for the below-threshold telemetry column, recorded in every condition.
    #[serde(default = "default_telemetry_tau")]
    pub telemetry_tau: f64,
}

impl TrainConfig {
    /// CraterCNN on 500/500 synthetic craters, SGD at 0.05, base condition.
    pub fn crater_default(width: usize, seed: u64) -> Self {
        TrainConfig {
            model: ModelSpec::cratercnn(width),
            dataset: DatasetSpec::synth(500, 500, 0),
            seed,
            epochs: 100,
            batch_size: 32,
            optimizer: OptimizerConfig::Sgd { lr: 0.05 },
            randomout: None,
            condition: Condition::Base,
            telemetry_tau: DEFAULT_TELEMETRY_TAU,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs > 0 && self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.optimizer.lr() > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if let Some(ro) = &self.randomout {
            ro.validate()?;
            if self.model.with_batchnorm {
                return Err(Error::Config("RandomOut and BatchNorm cannot be combined".into()));
            }
        }
        match (self.condition, &self.randomout, self.model.with_batchnorm) {
            (Condition::Base, None, false) | (Condition::RandomOut, Some(_), false) | (Condition::Batchnorm, None, true) => {
                Ok(())
            }
            (c, ro, bn) => Err(Error::Config(format!(
                "condition {c} is inconsistent with randomout={} batchnorm={bn}",
                ro.is_some()
            ))),
        }
    }

    /// Same run under another condition; seed, data and everything else unchanged.
    pub fn with_condition(&self, condition: Condition, randomout: RandomOutConfig) -> Self {
        let mut cfg = self.clone();
        cfg.condition = condition;
        cfg.randomout = (condition == Condition::RandomOut).then_some(randomout);
        cfg.model.with_batchnorm = condition == Condition::Batchnorm;
        cfg
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// JSON with object keys sorted, independent of the field order in any input file.
    pub fn canonical_json(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        serde_json::to_string(&value).expect("value serializes")
    }

    /// First 16 hex digits of the SHA-256 of [`Self::canonical_json`].
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_json().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}
