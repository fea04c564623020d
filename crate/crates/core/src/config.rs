//! Run configuration.
//!
//! Config files are TOML key-value text; every field is optional and falls
//! back to the defaults below. Example:
//!
//! ```toml
//! train = "data/train.csv"
//! test = "data/test.csv"
//! seed = 7
//! baseline = "none"
//!
//! [model]
//! trunk = [32]
//! feature_dim = 16
//!
//! [loss]
//! family = "relative"
//! level = "class"
//! eta = 0.01
//! kappa = 25
//! rho = 0.5
//!
//! [optimizer]
//! lr = 0.05
//! momentum = 0.9
//! weight_decay = 0.0005
//! batch_size = 256
//! epochs = 100
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::Baseline;
use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::model::ModelSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub trunk: Vec<usize>,
    pub feature_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            trunk: vec![32],
            feature_dim: 64,
        }
    }
}

impl ModelConfig {
    pub fn spec(&self, input_dim: usize, class_counts: &[usize]) -> ModelSpec {
        ModelSpec::new(input_dim, self.trunk.clone(), class_counts.to_vec())
            .with_feature_dim(self.feature_dim)
    }
}

/// SGD with momentum and L2 weight decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            momentum: 0.9,
            weight_decay: 0.0005,
            batch_size: 256,
            epochs: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub baseline: Baseline,
    /// Attribute balanced by the resampling baselines. `None` on multi-label
    /// data selects greedy multi-label over-sampling.
    pub target_label: Option<usize>,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub attribute_names: Vec<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: None,
            val: None,
            test: None,
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            baseline: Baseline::None,
            target_label: None,
            optimizer: OptimizerConfig::default(),
            seed: 0,
            out: None,
            attribute_names: Vec::new(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let o = &self.optimizer;
        if o.batch_size < 2 {
            return Err(Error::Config("batch size must be at least 2".into()));
        }
        if o.epochs < 1 {
            return Err(Error::Config("need at least one epoch".into()));
        }
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", o.lr)));
        }
        if !(0.0..1.0).contains(&o.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", o.momentum)));
        }
        if o.weight_decay.is_nan() || o.weight_decay < 0.0 {
            return Err(Error::Config("weight decay must be nonnegative".into()));
        }
        self.loss.validate()
    }
}
