use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture of a pre-layernorm GPT-2-style decoder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub layernorm_epsilon: f32,
}

impl ModelConfig {
    pub fn new(
        n_layers: usize,
        n_heads: usize,
        d_model: usize,
        vocab_size: usize,
        max_seq_len: usize,
    ) -> Result<Self> {
        if n_heads == 0 || !d_model.is_multiple_of(n_heads) {
            return Err(Error::input(format!(
                "d_model {d_model} is not divisible into {n_heads} heads"
            )));
        }
        let cfg = ModelConfig {
            n_layers,
            n_heads,
            d_model,
            d_head: d_model / n_heads,
            vocab_size,
            max_seq_len,
            layernorm_epsilon: 1e-5,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// 2 layers, 4 heads, d=64, |V|=512, 128 positions.
    pub fn desk_scale() -> Self {
        Self::new(2, 4, 64, 512, 128).expect("valid preset")
    }

    /// GPT-2 small dimensions. Constructible and runnable, not meant to be trained here.
    pub fn gpt2_small() -> Self {
        Self::new(12, 12, 768, 50257, 1024).expect("valid preset")
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers < 1 || self.n_heads < 1 || self.max_seq_len < 1 {
            return Err(Error::input("n_layers, n_heads and max_seq_len must be at least 1"));
        }
        if self.vocab_size < 2 {
            return Err(Error::input("vocab_size must be at least 2"));
        }
        if self.d_head == 0 || self.n_heads * self.d_head != self.d_model {
            return Err(Error::input(format!(
                "d_model ({}) must equal n_heads ({}) x d_head ({})",
                self.d_model, self.n_heads, self.d_head
            )));
        }
        if !(self.layernorm_epsilon > 0.0 && self.layernorm_epsilon.is_finite()) {
            return Err(Error::input("layernorm_epsilon must be a small positive number"));
        }
        Ok(())
    }

    pub fn d_mlp(&self) -> usize {
        4 * self.d_model
    }

    pub fn check_layer(&self, layer: usize) -> Result<()> {
        if layer >= self.n_layers {
            return Err(Error::index("layer", layer, self.n_layers));
        }
        Ok(())
    }

    pub fn check_head(&self, layer: usize, head: usize) -> Result<()> {
        self.check_layer(layer)?;
        if head >= self.n_heads {
            return Err(Error::index("head", head, self.n_heads));
        }
        Ok(())
    }
}
