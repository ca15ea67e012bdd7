use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hyperparameters of one decoder-only model (router, expert or dense baseline).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ff: usize,
    pub vocab: usize,
    pub context: usize,
    pub rope_base: f64,
}

impl ModelConfig {
    /// Feedforward width defaults to four times the hidden size.
    pub fn new(layers: usize, hidden: usize, heads: usize, vocab: usize, context: usize) -> Self {
        Self { layers, hidden, heads, ff: 4 * hidden, vocab, context, rope_base: 10_000.0 }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.layers < 1 {
            return bad("model needs at least one layer".into());
        }
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return bad(format!("hidden size {} not divisible by {} heads", self.hidden, self.heads));
        }
        if self.head_dim() % 2 != 0 {
            return bad(format!("rotary encoding needs an even head dimension, got {}", self.head_dim()));
        }
        if self.ff < self.hidden {
            return bad(format!("feedforward width {} below hidden size {}", self.ff, self.hidden));
        }
        if self.vocab < 2 {
            return bad("vocabulary must hold at least two ids".into());
        }
        if self.context < 2 {
            return bad("context length must be at least 2".into());
        }
        if !(self.rope_base > 1.0) {
            return bad(format!("rotary base must exceed 1, got {}", self.rope_base));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let (h, f, v) = (self.hidden, self.ff, self.vocab);
        2 * v * h + h + self.layers * (4 * h * h + 2 * h * f + 2 * h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes() {
        assert!(ModelConfig::new(1, 8, 3, 17, 4).validate().is_err());
        assert!(ModelConfig::new(0, 8, 2, 17, 4).validate().is_err());
        assert!(ModelConfig::new(1, 8, 2, 17, 1).validate().is_err());
        // head dim 3 is odd
        assert!(ModelConfig::new(1, 6, 2, 17, 4).validate().is_err());
        let mut c = ModelConfig::new(1, 8, 2, 17, 4);
        c.ff = 4;
        assert!(c.validate().is_err());
        assert!(ModelConfig::new(1, 8, 2, 17, 4).validate().is_ok());
    }
}
