use crate::error::{Error, Result};

use super::tokenizer::VOCAB_SIZE;

/// Architecture hyperparameters plus the weight seed. Two equal configs
/// always produce bit-identical models.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    /// Must equal `num_heads * head_dim`.
    pub hidden_dim: usize,
    pub vocab_size: usize,
    pub rope_base: f64,
    pub weight_seed: u64,
    pub max_position: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::new(2, 4, 8, 42)
    }
}

impl ModelConfig {
    /// Byte-vocabulary config with `hidden_dim` derived from heads and head size.
    pub fn new(num_layers: usize, num_heads: usize, head_dim: usize, weight_seed: u64) -> Self {
        Self {
            num_layers,
            num_heads,
            head_dim,
            hidden_dim: num_heads * head_dim,
            vocab_size: VOCAB_SIZE,
            rope_base: 10_000.0,
            weight_seed,
            max_position: 4096,
        }
    }

    pub fn with_max_position(mut self, max_position: usize) -> Self {
        self.max_position = max_position;
        self
    }

    pub fn ffn_dim(&self) -> usize {
        4 * self.hidden_dim
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.num_layers == 0 {
            return bad("num_layers must be positive".into());
        }
        if self.num_heads == 0 {
            return bad("num_heads must be positive".into());
        }
        if self.head_dim == 0 || !self.head_dim.is_multiple_of(2) {
            return bad(format!("head_dim must be a positive even number, got {}", self.head_dim));
        }
        if self.hidden_dim != self.num_heads * self.head_dim {
            return bad(format!(
                "hidden_dim {} != num_heads * head_dim = {}",
                self.hidden_dim,
                self.num_heads * self.head_dim
            ));
        }
        if self.vocab_size == 0 {
            return bad("vocab_size must be positive".into());
        }
        if !(self.rope_base.is_finite() && self.rope_base > 0.0) {
            return bad(format!("rope_base must be a positive real, got {}", self.rope_base));
        }
        if self.max_position == 0 {
            return bad("max_position must be positive".into());
        }
        Ok(())
    }

    /// Canonical little-endian encoding, used for fingerprinting.
    pub(crate) fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64);
        for v in [
            self.num_layers,
            self.num_heads,
            self.head_dim,
            self.hidden_dim,
            self.vocab_size,
            self.max_position,
        ] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        out.extend_from_slice(&self.rope_base.to_le_bytes());
        out.extend_from_slice(&self.weight_seed.to_le_bytes());
        out
    }
}
