use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of the miniature decoder.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    /// Byte-level desk configuration.
    fn default() -> Self {
        ModelConfig {
            vocab_size: 256,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
            max_seq_len: 128,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// A two-layer model small enough for exhaustive finite differences.
    pub fn toy(seed: u64) -> Self {
        ModelConfig {
            vocab_size: 256,
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_ff: 32,
            max_seq_len: 32,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be at least 1")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "model.d_model ({}) must be divisible by model.n_heads ({})",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Closed-form parameter count of [`BackboneWeights`](super::BackboneWeights).
    pub fn parameter_count(&self) -> usize {
        let (v, d, f) = (self.vocab_size, self.d_model, self.d_ff);
        let per_layer = 4 * d * d + 3 * d * f + 2 * d;
        v * d + self.max_seq_len * d + self.n_layers * per_layer + d + d * v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heads_must_divide_width() {
        let cfg = ModelConfig {
            n_heads: 3,
            ..ModelConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        assert!(ModelConfig::default().validate().is_ok());
    }

    #[test]
    fn zero_dimension_rejected() {
        let cfg = ModelConfig {
            d_ff: 0,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
