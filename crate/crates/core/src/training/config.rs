use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::optim::AdamConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub early_stop_patience: usize,
    pub seed: u64,
    pub grad_clip: Option<f64>,
    /// Offset between consecutive training windows.
    pub window_stride: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            max_epochs: 30,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            early_stop_patience: 5,
            seed: 0,
            grad_clip: None,
            window_stride: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::config(msg.to_string()));
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1");
        }
        if self.max_epochs == 0 {
            return fail("max_epochs must be >= 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate must be > 0");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("adam betas must lie in [0, 1)");
        }
        if self.adam_eps <= 0.0 {
            return fail("adam_eps must be > 0");
        }
        if self.early_stop_patience == 0 {
            return fail("early_stop_patience must be >= 1");
        }
        if self.grad_clip.is_some_and(|c| c <= 0.0) {
            return fail("grad_clip must be > 0");
        }
        if self.window_stride == 0 {
            return fail("window_stride must be >= 1");
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            grad_clip: self.grad_clip,
        }
    }
}

/// Hex SHA-256 of the JSON form of both configurations.
pub fn config_hash(model: &ModelConfig, train: &TrainConfig) -> String {
    let json = serde_json::json!({ "model": model, "train": train });
    hex::encode(Sha256::digest(json.to_string().as_bytes()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_tracks_config() {
        let m = ModelConfig::default();
        let t = TrainConfig::default();
        assert_eq!(config_hash(&m, &t), config_hash(&m, &t));
        let t2 = TrainConfig { seed: 1, ..t.clone() };
        assert_ne!(config_hash(&m, &t), config_hash(&m, &t2));
        assert_eq!(config_hash(&m, &t).len(), 64);
    }

    #[test]
    fn validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { learning_rate: 0.0, ..Default::default() },
            TrainConfig { early_stop_patience: 0, ..Default::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }
}
