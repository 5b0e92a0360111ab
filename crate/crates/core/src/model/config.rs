use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Activation;

/// Which network a [`ModelConfig`] describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    #[default]
    Mcformer,
    /// Per-channel shared linear map from look-back to horizon.
    Linear,
}

/// Hyperparameters of the forecaster. Serialised field names follow the
/// usual single-letter notation (`M`, `L`, `h`, `m`, `p`, `S`, `P`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Number of channels.
    #[serde(rename = "M")]
    pub channels: usize,
    /// Look-back window length.
    #[serde(rename = "L")]
    pub lookback: usize,
    /// Forecast horizon.
    #[serde(rename = "h")]
    pub horizon: usize,
    /// Channels mixed into each target channel; 0 is pure channel
    /// independence.
    #[serde(rename = "m")]
    pub mix: usize,
    #[serde(rename = "p")]
    pub patch_len: usize,
    #[serde(rename = "S")]
    pub stride: usize,
    /// Token width after projection.
    #[serde(rename = "P")]
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub activation: Activation,
    /// Normalise before each sub-layer instead of after the residual add.
    pub norm_first: bool,
    /// Learnable per-channel affine inside the instance normalisation.
    pub revin_affine: bool,
    pub revin_eps: f64,
    pub layer_norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: ModelKind::Mcformer,
            channels: 8,
            lookback: 96,
            horizon: 96,
            mix: 3,
            patch_len: 16,
            stride: 8,
            d_model: 128,
            n_heads: 4,
            n_layers: 3,
            d_ff: 256,
            dropout: 0.0,
            activation: Activation::Gelu,
            norm_first: false,
            revin_affine: true,
            revin_eps: 1e-5,
            layer_norm_eps: 1e-5,
        }
    }
}

/// Tokens produced from a look-back of `lookback` steps:
/// `⌊(L − p) / S⌋ + 2` (the last one covers the end padding).
pub fn token_count(lookback: usize, patch_len: usize, stride: usize) -> Result<usize> {
    if patch_len == 0 || stride == 0 {
        return Err(Error::config("patch length and stride must be >= 1"));
    }
    if patch_len > lookback {
        return Err(Error::config(format!(
            "patch length p={patch_len} exceeds look-back L={lookback}"
        )));
    }
    Ok((lookback - patch_len) / stride + 2)
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("M", self.channels),
            ("L", self.lookback),
            ("h", self.horizon),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be >= 1")));
            }
        }
        if self.kind != ModelKind::Linear && self.mix >= self.channels {
            return Err(Error::config(format!(
                "m must be < M (m={}, M={})",
                self.mix, self.channels
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        if !(self.revin_eps > 0.0) || !(self.layer_norm_eps > 0.0) {
            return Err(Error::config("normalisation eps must be > 0"));
        }
        if self.kind == ModelKind::Linear {
            return Ok(());
        }
        if self.patch_len == 0 || self.patch_len > self.lookback {
            return Err(Error::config(format!(
                "p must satisfy 1 <= p <= L (p={}, L={})",
                self.patch_len, self.lookback
            )));
        }
        if self.stride == 0 || self.stride > self.patch_len {
            return Err(Error::config(format!(
                "S must satisfy 1 <= S <= p (S={}, p={})",
                self.stride, self.patch_len
            )));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return Err(Error::config("P, n_heads and d_ff must be >= 1"));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::config(format!(
                "P must be divisible by n_heads (P={}, n_heads={})",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    /// Token count N for this configuration.
    pub fn tokens(&self) -> Result<usize> {
        token_count(self.lookback, self.patch_len, self.stride)
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Values per patch after mixing: `p · (m + 1)`.
    pub fn patch_width(&self) -> usize {
        self.patch_len * (self.mix + 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_count_examples() {
        assert_eq!(token_count(96, 16, 8).unwrap(), 12);
        assert_eq!(token_count(96, 96, 96).unwrap(), 2);
        assert!(token_count(8, 9, 1).is_err());
    }

    #[test]
    fn validation_messages() {
        let bad = ModelConfig {
            mix: 5,
            channels: 4,
            ..ModelConfig::default()
        };
        let msg = bad.validate().unwrap_err().to_string();
        assert!(msg.contains("m must be < M"), "{msg}");
        let bad = ModelConfig {
            d_model: 10,
            n_heads: 4,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = ModelConfig {
            stride: 17,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(ModelConfig::default().validate().is_ok());
    }

    #[test]
    fn serde_uses_short_names() {
        let cfg: ModelConfig = serde_json::from_str(r#"{"M": 4, "m": 2, "P": 16}"#).unwrap();
        assert_eq!((cfg.channels, cfg.mix, cfg.d_model), (4, 2, 16));
        assert!(serde_json::from_str::<ModelConfig>(r#"{"bogus": 1}"#).is_err());
    }
}
