use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape and initialisation of a [`SeqModel`](super::SeqModel).
///
/// `n_layers` applies to both the encoder and the decoder stack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub dropout_rate: f64,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 2,
            hidden: 64,
            heads: 4,
            ffn_mult: 4,
            vocab_size: 64,
            max_positions: 256,
            dropout_rate: 0.0,
            init_std: 0.02,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Validation(m));
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return fail(format!(
                "hidden {} must be a positive multiple of heads {}",
                self.hidden, self.heads
            ));
        }
        if self.vocab_size < 6 {
            return fail(format!("vocab_size {} below 6", self.vocab_size));
        }
        if self.max_positions == 0 || self.ffn_mult == 0 {
            return fail("max_positions and ffn_mult must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return fail(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        if !(self.init_std >= 0.0) || !self.init_std.is_finite() {
            return fail(format!("init_std {} must be finite and non-negative", self.init_std));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn ffn_dim(&self) -> usize {
        self.hidden * self.ffn_mult
    }
}
