//! Browser bindings. Everything crosses the boundary as JSON strings so the
//! page needs no generated TypeScript types.

use attention_lens::analysis::{inspect_head, transfer_matrix, HeadInspection};
use attention_lens::corpus::{Corpus, Tokenizer};
use attention_lens::lens::{init_lens, kl_divergence, BaselineMode, InitMode, Lens, TokenDistribution};
use attention_lens::model::{pretrain, ModelBundle, ModelConfig, PretrainOptions};
use attention_lens::trainer::{LensTrainer, TrainConfig};
use serde_json::json;
use wasm_bindgen::prelude::*;

const VOCAB: usize = 300;
const TEXT: &str = include_str!("../../core/fixtures/alice29.txt");
const SEQ_LEN: usize = 32;

/// A small model pretrained in the page on *Alice in Wonderland*, plus whatever lenses the user has trained.
#[wasm_bindgen]
pub struct Demo {
    tokenizer: Tokenizer,
    corpus: Corpus,
    model: ModelBundle,
    lenses: Vec<Lens>,
}

impl Demo {
    pub fn build(seed: u64, pretrain_steps: usize) -> Result<Demo, String> {
        let tokenizer = Tokenizer::build(&[TEXT], VOCAB).map_err(|e| e.to_string())?;
        let corpus = Corpus::from_text("alice29.txt", TEXT, &tokenizer).map_err(|e| e.to_string())?;
        let config = ModelConfig::new(2, 4, 32, tokenizer.vocab_size(), SEQ_LEN).map_err(|e| e.to_string())?;
        let mut opts = PretrainOptions::desk_scale(&config, pretrain_steps, seed);
        opts.batch_size = 8;
        opts.seq_len = SEQ_LEN - 1;
        let model = pretrain(config, &corpus, &opts).map_err(|e| e.to_string())?.model;
        Ok(Demo {
            tokenizer,
            corpus,
            model,
            lenses: Vec::new(),
        })
    }

    fn lens_for(&self, layer: usize, head: usize) -> Result<Lens, String> {
        match self.lenses.iter().find(|l| l.layer == layer && l.head == head) {
            Some(l) => Ok(l.clone()),
            None => init_lens(&self.model, layer, head, InitMode::WarmStart, 0).map_err(|e| e.to_string()),
        }
    }

    pub fn train(&mut self, layer: usize, head: usize, steps: usize, learning_rate: f64) -> Result<String, String> {
        let cfg = TrainConfig {
            steps,
            batch_size: 8,
            seq_len: SEQ_LEN,
            learning_rate,
            checkpoint_every: (steps / 20).max(1),
            ..TrainConfig::default()
        };
        let outcome = LensTrainer::new(&self.model, layer, head, &self.corpus, &cfg)
            .and_then(|t| t.run())
            .map_err(|e| e.to_string())?;
        let summary = json!({
            "layer": layer,
            "head": head,
            "initial_loss": outcome.initial_loss(),
            "history": outcome.history,
        });
        self.lenses.retain(|l| !(l.layer == layer && l.head == head));
        self.lenses.push(outcome.lens);
        Ok(summary.to_string())
    }

    pub fn inspection(&self, prompt: &str, layer: usize, head: usize, k: usize) -> Result<HeadInspection, String> {
        let lens = self.lens_for(layer, head)?;
        inspect_head(&self.model, &self.tokenizer, &lens, prompt, None, k, BaselineMode::FinalLayerNorm)
            .map_err(|e| e.to_string())
    }

    pub fn transfer(&self, n_eval: usize) -> Result<String, String> {
        if self.lenses.is_empty() {
            return Err("train at least one lens first".into());
        }
        let windows = self.corpus.heldout_windows(SEQ_LEN, n_eval, 0).map_err(|e| e.to_string())?;
        let report = transfer_matrix(&self.model, &self.lenses, &windows).map_err(|e| e.to_string())?;
        serde_json::to_string(&report).map_err(|e| e.to_string())
    }
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, pretrain_steps: u32) -> Result<Demo, JsError> {
        Demo::build(u64::from(seed), pretrain_steps as usize).map_err(|e| JsError::new(&e))
    }

    /// `{config, fingerprint, trained: [[layer, head], ...]}`
    #[wasm_bindgen(js_name = modelInfo)]
    pub fn model_info(&self) -> String {
        json!({
            "config": self.model.config(),
            "fingerprint": self.model.fingerprint(),
            "trained": self.lenses.iter().map(|l| [l.layer, l.head]).collect::<Vec<_>>(),
        })
        .to_string()
    }

    /// Trains (or retrains) one lens and returns its loss history.
    #[wasm_bindgen(js_name = trainLens)]
    pub fn train_lens(&mut self, layer: u32, head: u32, steps: u32, learning_rate: f64) -> Result<String, JsError> {
        self.train(layer as usize, head as usize, steps as usize, learning_rate)
            .map_err(|e| JsError::new(&e))
    }

    /// Paired lens/baseline top-k at the last prompt token. Untrained heads use
    /// the warm-start lens, which reads the same as the raw unembedding.
    pub fn inspect(&self, prompt: &str, layer: u32, head: u32, k: u32) -> Result<String, JsError> {
        self.inspection(prompt, layer as usize, head as usize, k as usize)
            .and_then(|r| serde_json::to_string(&r).map_err(|e| e.to_string()))
            .map_err(|e| JsError::new(&e))
    }

    /// Divergence between every pair of trained lenses.
    #[wasm_bindgen(js_name = transferMatrix)]
    pub fn transfer_matrix(&self, n_eval: u32) -> Result<String, JsError> {
        self.transfer(n_eval as usize).map_err(|e| JsError::new(&e))
    }
}

/// `KL(softmax(p) ‖ softmax(q))` for two logit vectors.
pub fn kl_of_logits(p: &[f64], q: &[f64]) -> Result<f64, String> {
    kl_divergence(
        &TokenDistribution::from_logits(p.to_vec()),
        &TokenDistribution::from_logits(q.to_vec()),
    )
    .map_err(|e| e.to_string())
}

#[wasm_bindgen(js_name = klOfLogits)]
pub fn kl_of_logits_js(p: Vec<f64>, q: Vec<f64>) -> Result<f64, JsError> {
    kl_of_logits(&p, &q).map_err(|e| JsError::new(&e))
}
