//! Frozen decoder-only transformer that lenses are trained against.

mod config;
mod forward;
mod io;
mod pretrain;
mod weights;

use ndarray::{Array1, Array2};

pub use config::ModelConfig;
pub use forward::{forward_with_capture, ForwardResult, HeadCapture};
pub use pretrain::{
    heldout_cross_entropy, pretrain, pretrain_base_model, PretrainOptions, PretrainOutcome,
};
pub use weights::{LayerWeights, Weights};

pub(crate) use forward::check_tokens;

use crate::tensor_file::{self, TensorRef};

/// Model weights plus architecture, immutable once constructed.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    config: ModelConfig,
    weights: Weights,
    fingerprint: String,
}

impl ModelBundle {
    pub fn new(config: ModelConfig, weights: Weights) -> Self {
        let fingerprint = weights_fingerprint(&weights);
        ModelBundle {
            config,
            weights,
            fingerprint,
        }
    }

    /// Seeded random initialization (GPT-2 std 0.02).
    pub fn random(config: ModelConfig, seed: u64) -> Self {
        Self::new(config, Weights::random(&config, seed, 0.02))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn unembedding(&self) -> &Array2<f32> {
        &self.weights.unembedding
    }

    pub fn final_ln(&self) -> (&Array1<f32>, &Array1<f32>) {
        (&self.weights.final_ln_gain, &self.weights.final_ln_bias)
    }

    pub fn forward(&self, tokens: &[u32], capture_heads: bool) -> crate::Result<ForwardResult> {
        forward_with_capture(self, tokens, capture_heads)
    }
}

pub(crate) fn weights_fingerprint(weights: &Weights) -> String {
    let names = weights.names();
    let shapes = weights.shapes();
    let slices = weights.slices();
    tensor_file::fingerprint(
        names
            .iter()
            .zip(&shapes)
            .zip(slices)
            .map(|((name, shape), data)| TensorRef { name, shape, data }),
    )
}

pub use io::{load_model, save_model};
