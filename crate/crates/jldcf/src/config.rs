//! Serializable run configuration: network, loss, optimizer, seed, epochs.

use serde::{Deserialize, Serialize};

use crate::error::ConfigError;
use crate::loss::LossConfig;
use crate::net::NetworkConfig;

/// SGD hyperparameters. Momentum 0.99 and weight decay 5e-4 follow the
/// training setup; the learning rate is resolution-dependent because the
/// losses are pixel sums.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// Base learning rate at the 320x320 resolution for randomly initialized
/// desk-scale runs, calibrated on the synthetic overfit experiment. The
/// sum-reduced losses scale with pixel count, so the default rescales by
/// (H0/320)^2.
pub const BASE_LR_AT_320: f64 = 6.4e-3;

pub fn default_lr(input_size: usize) -> f64 {
    BASE_LR_AT_320 * (input_size as f64 / 320.0).powi(2)
}

impl OptimizerConfig {
    pub fn for_input_size(input_size: usize) -> Self {
        OptimizerConfig {
            lr: default_lr(input_size),
            momentum: 0.99,
            weight_decay: 5e-4,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.lr <= 0.0 {
            return Err(ConfigError::Invalid(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(ConfigError::Invalid(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(ConfigError::Invalid(format!(
                "weight decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Everything one training/evaluation run needs, JSON round-trip stable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    pub epochs: usize,
    #[serde(default)]
    pub out_dir: Option<String>,
}

impl RunConfig {
    /// Desk-scale default run.
    pub fn desk() -> Self {
        let network = NetworkConfig::desk();
        let optimizer = OptimizerConfig::for_input_size(network.input_size());
        RunConfig {
            network,
            loss: LossConfig::default(),
            optimizer,
            seed: 1,
            epochs: 10,
            out_dir: None,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.network.validate()?;
        self.loss.validate()?;
        self.optimizer.validate()?;
        if self.epochs == 0 {
            return Err(ConfigError::Invalid("epochs must be >= 1".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, ConfigError> {
        serde_json::from_str(s).map_err(|e| ConfigError::Invalid(format!("bad config json: {e}")))
    }
}
