//! Next-token pretraining of the substrate model.
//!
//! Lens experiments need a model whose output distribution carries real
//! structure; this trains one from scratch on the same corpus the lenses later
//! see. The loop is single-threaded in its update path and deterministic: per
//! sequence gradients may be computed in parallel but are summed in order.

use ndarray::Array2;

use super::forward::{backward, run};
use super::{check_tokens, ModelBundle, ModelConfig, Weights};
use crate::corpus::{BatchStream, Corpus};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainOptions {
    pub steps: usize,
    pub batch_size: usize,
    /// Input length; windows of `seq_len + 1` tokens are drawn so every input
    /// position has a target.
    pub seq_len: usize,
    pub learning_rate: f32,
    pub grad_clip: f32,
    pub seed: u64,
}

impl PretrainOptions {
    pub fn desk_scale(config: &ModelConfig, steps: usize, seed: u64) -> Self {
        PretrainOptions {
            steps,
            batch_size: 16,
            seq_len: config.max_seq_len.min(64),
            learning_rate: 3e-3,
            grad_clip: 1.0,
            seed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub model: ModelBundle,
    /// Mean training cross-entropy per step (nats).
    pub losses: Vec<f64>,
}

/// Trains a fresh model with desk-scale defaults. `steps == 0` returns the
/// seeded initialization.
pub fn pretrain_base_model(
    config: ModelConfig,
    corpus: &Corpus,
    steps: usize,
    seed: u64,
) -> Result<ModelBundle> {
    let opts = PretrainOptions::desk_scale(&config, steps, seed);
    pretrain(config, corpus, &opts).map(|o| o.model)
}

pub fn pretrain(config: ModelConfig, corpus: &Corpus, opts: &PretrainOptions) -> Result<PretrainOutcome> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(Error::input("corpus is empty"));
    }
    if let Some(max) = corpus.max_token() {
        if max as usize >= config.vocab_size {
            return Err(Error::input(format!(
                "corpus contains token {max}, model vocabulary is {}",
                config.vocab_size
            )));
        }
    }
    if opts.seq_len == 0 || opts.seq_len > config.max_seq_len {
        return Err(Error::input(format!(
            "pretraining seq_len {} must be in 1..={}",
            opts.seq_len, config.max_seq_len
        )));
    }

    let mut weights = Weights::random(&config, opts.seed, 0.02);
    let mut losses = Vec::with_capacity(opts.steps);
    if opts.steps > 0 {
        let mut stream = BatchStream::new(
            corpus.train(),
            opts.seq_len + 1,
            opts.batch_size,
            opts.seed ^ 0x5EED,
        )?;
        let mut adam = WeightsAdam::new(&config);
        for step in 0..opts.steps {
            let batch = stream.next().expect("stream is infinite");
            let (loss, mut grads) = batch_loss_and_grad(&config, &weights, &batch.sequences);
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    step: Some(step),
                    message: "pretraining loss is not finite".into(),
                });
            }
            clip_global_norm(&mut grads, opts.grad_clip);
            adam.update(&mut weights, &grads, opts.learning_rate);
            losses.push(loss);
        }
    }
    Ok(PretrainOutcome {
        model: ModelBundle::new(config, weights),
        losses,
    })
}

/// Mean next-token cross-entropy over `windows` (each of length ≥ 2).
pub fn heldout_cross_entropy(model: &ModelBundle, windows: &[Vec<u32>]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for w in windows {
        if w.len() < 2 {
            return Err(Error::input("evaluation windows need at least two tokens"));
        }
        let inputs = &w[..w.len() - 1];
        check_tokens(model.config(), inputs)?;
        let (logits, _, _) = run(model.config(), model.weights(), inputs, false, false);
        for (p, row) in logits.rows().into_iter().enumerate() {
            let max = row.fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
            let lse = row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln() + max;
            total += lse - row[w[p + 1] as usize] as f64;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::input("no evaluation windows"));
    }
    Ok(total / count as f64)
}

fn sequence_grad(cfg: &ModelConfig, w: &Weights, window: &[u32], norm: f32) -> (f64, Weights) {
    let inputs = &window[..window.len() - 1];
    let (logits, _, cache) = run(cfg, w, inputs, false, true);
    let mut dlogits = Array2::<f32>::zeros(logits.dim());
    let mut loss = 0.0f64;
    for (p, row) in logits.rows().into_iter().enumerate() {
        let target = window[p + 1] as usize;
        let max = row.fold(f32::NEG_INFINITY, |m, &v| m.max(v));
        let mut drow = dlogits.row_mut(p);
        let mut sum = 0.0f32;
        for (d, &v) in drow.iter_mut().zip(row) {
            *d = (v - max).exp();
            sum += *d;
        }
        loss += (sum.ln() + max - row[target]) as f64;
        drow.mapv_inplace(|v| v / sum / norm);
        drow[target] -= 1.0 / norm;
    }
    let mut grads = Weights::zeros(cfg);
    backward(cfg, w, inputs, cache.as_ref().expect("cache requested"), &dlogits, &mut grads);
    (loss, grads)
}

fn batch_loss_and_grad(cfg: &ModelConfig, w: &Weights, windows: &[Vec<u32>]) -> (f64, Weights) {
    let n_predictions = windows.iter().map(|s| s.len() - 1).sum::<usize>() as f32;

    #[cfg(feature = "parallel")]
    let parts: Vec<(f64, Weights)> = {
        use rayon::prelude::*;
        windows
            .par_iter()
            .map(|s| sequence_grad(cfg, w, s, n_predictions))
            .collect()
    };
    #[cfg(not(feature = "parallel"))]
    let parts: Vec<(f64, Weights)> = windows
        .iter()
        .map(|s| sequence_grad(cfg, w, s, n_predictions))
        .collect();

    let mut iter = parts.into_iter();
    let (mut loss, mut grads) = iter.next().expect("non-empty batch");
    for (l, g) in iter {
        loss += l;
        grads.add_assign(&g);
    }
    (loss / n_predictions as f64, grads)
}

fn clip_global_norm(grads: &mut Weights, max_norm: f32) {
    if max_norm <= 0.0 {
        return;
    }
    let norm = grads
        .slices()
        .iter()
        .flat_map(|s| s.iter())
        .map(|&g| (g as f64) * (g as f64))
        .sum::<f64>()
        .sqrt() as f32;
    if norm > max_norm {
        let scale = max_norm / norm;
        for s in grads.slices_mut() {
            s.iter_mut().for_each(|g| *g *= scale);
        }
    }
}

struct WeightsAdam {
    m: Weights,
    v: Weights,
    t: i32,
}

impl WeightsAdam {
    const B1: f32 = 0.9;
    const B2: f32 = 0.999;
    const EPS: f32 = 1e-8;

    fn new(cfg: &ModelConfig) -> Self {
        WeightsAdam {
            m: Weights::zeros(cfg),
            v: Weights::zeros(cfg),
            t: 0,
        }
    }

    fn update(&mut self, params: &mut Weights, grads: &Weights, lr: f32) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for (((p, g), m), v) in params
            .slices_mut()
            .into_iter()
            .zip(grads.slices())
            .zip(self.m.slices_mut())
            .zip(self.v.slices_mut())
        {
            for i in 0..p.len() {
                m[i] = Self::B1 * m[i] + (1.0 - Self::B1) * g[i];
                v[i] = Self::B2 * v[i] + (1.0 - Self::B2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + Self::EPS);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synthetic, Tokenizer};

    fn setup() -> (ModelConfig, Corpus) {
        let text = synthetic::book_text(5, 30_000);
        let tok = Tokenizer::build(&[&text], 300).unwrap();
        let corpus = Corpus::from_text("synthetic", &text, &tok).unwrap();
        let cfg = ModelConfig::new(1, 2, 16, tok.vocab_size(), 32).unwrap();
        (cfg, corpus)
    }

    #[test]
    fn zero_steps_returns_seeded_init() {
        let (cfg, corpus) = setup();
        let m = pretrain_base_model(cfg, &corpus, 0, 7).unwrap();
        assert_eq!(m, ModelBundle::new(cfg, Weights::random(&cfg, 7, 0.02)));
    }

    #[test]
    fn training_is_deterministic_and_beats_uniform() {
        let (cfg, corpus) = setup();
        let mut opts = PretrainOptions::desk_scale(&cfg, 60, 3);
        opts.batch_size = 4;
        opts.seq_len = 24;
        let a = pretrain(cfg, &corpus, &opts).unwrap();
        let b = pretrain(cfg, &corpus, &opts).unwrap();
        assert_eq!(a.model.fingerprint(), b.model.fingerprint());
        let windows = corpus.heldout_windows(25, 20, 1).unwrap();
        let ce = heldout_cross_entropy(&a.model, &windows).unwrap();
        assert!(ce < (cfg.vocab_size as f64).ln(), "held-out CE {ce}");
        assert!(a.losses.last().unwrap() < a.losses.first().unwrap());
    }

    #[test]
    fn rejects_out_of_vocab_corpus() {
        let (cfg, _) = setup();
        let corpus = Corpus::new("x", vec![0, 1, 5000], 0.0).unwrap();
        assert!(pretrain_base_model(cfg, &corpus, 1, 0).is_err());
    }
}
