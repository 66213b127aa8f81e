use crate::error::{CoreError, Result};
use crate::token::RESERVED_VOCAB_SIZE;
use serde::{Deserialize, Serialize};

/// Shape and seed of the toy transformer.
///
/// Two processes constructing a model from equal configs hold bit-identical
/// weights: everything is derived from `weight_seed` through one PRNG stream
/// in a fixed order (see [`crate::model::Model::new`]).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Transformer layers.
    pub layers: usize,
    /// Residual stream width d.
    pub model_dim: usize,
    /// Attention heads.
    pub heads: usize,
    /// Per-head key/query width; `model_dim = heads * head_dim`.
    pub head_dim: usize,
    /// Logit width. Must cover the reserved vocabulary.
    pub vocab_size: usize,
    /// Seed for weight initialization.
    pub weight_seed: u64,
    /// Hard cap on absolute positions within one sequence.
    pub max_positions: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            model_dim: 64,
            heads: 4,
            head_dim: 16,
            vocab_size: 512,
            weight_seed: 0x5EED_0001,
            max_positions: 32_768,
        }
    }
}

impl ModelConfig {
    /// MLP hidden width (fixed at 2d for the toy shape).
    pub fn ff_dim(&self) -> usize {
        self.model_dim * 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(CoreError::InvalidConfig("layers must be >= 1".into()));
        }
        if self.model_dim != self.heads * self.head_dim {
            return Err(CoreError::InvalidConfig(format!(
                "model_dim {} != heads {} * head_dim {}",
                self.model_dim, self.heads, self.head_dim
            )));
        }
        if self.vocab_size < RESERVED_VOCAB_SIZE {
            return Err(CoreError::InvalidConfig(format!(
                "vocab_size {} < reserved vocabulary {}",
                self.vocab_size, RESERVED_VOCAB_SIZE
            )));
        }
        if self.max_positions == 0 || self.max_positions > u32::MAX as usize {
            return Err(CoreError::InvalidConfig("max_positions out of range".into()));
        }
        Ok(())
    }

    /// A small shape for unit tests; full default stays millisecond-fast but
    /// this keeps property tests snappy.
    pub fn tiny_for_tests() -> Self {
        Self {
            layers: 2,
            model_dim: 16,
            heads: 2,
            head_dim: 8,
            vocab_size: 300,
            weight_seed: 0xBEEF,
            max_positions: 2_048,
        }
    }
}
