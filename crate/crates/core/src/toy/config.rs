use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_VOCAB: usize = 512;
pub const MAX_DIM: usize = 128;
pub const MAX_LAYERS: usize = 8;
pub const MAX_HEADS: usize = 8;
pub const MAX_CONTEXT: usize = 256;
pub const MAX_FF: usize = 512;

/// Shape and initialization seed of a [`ToyTransformer`](super::ToyTransformer).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub vocab_size: usize,
    pub model_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub context: usize,
    pub ff_dim: usize,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            vocab_size: super::task::VOCAB_SIZE,
            model_dim: 32,
            layers: 2,
            heads: 4,
            context: 48,
            ff_dim: 64,
            seed: 0,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        let bounded = |name: &str, v: usize, max: usize| {
            if v == 0 || v > max {
                Err(Error::Config(format!("{name} must be in 1..={max}, got {v}")))
            } else {
                Ok(())
            }
        };
        bounded("vocab_size", self.vocab_size, MAX_VOCAB)?;
        bounded("model_dim", self.model_dim, MAX_DIM)?;
        bounded("layers", self.layers, MAX_LAYERS)?;
        bounded("heads", self.heads, MAX_HEADS)?;
        bounded("context", self.context, MAX_CONTEXT)?;
        bounded("ff_dim", self.ff_dim, MAX_FF)?;
        if !self.model_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "model_dim {} is not divisible by {} heads",
                self.model_dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }
}
