//! Lens optimization against the KL objective.
//!
//! Each (layer, head) gets its own batch stream and initialization seed, both
//! derived from `(cfg.seed, layer, head)`. Training a head alone, inside a
//! layer group, or across a checkpoint boundary therefore produces the same
//! bits.

mod checkpoint;
mod gradcheck;

use serde::{Deserialize, Serialize};

pub use checkpoint::{
    append_loss_log, load_checkpoint, load_checkpoint_for, read_loss_log, save_checkpoint,
    LensCheckpoint, OptimizerState, CHECKPOINT_FORMAT_VERSION,
};
pub use gradcheck::{grad_check, grad_check_lens, grad_check_with, GradCheckOptions, GradCheckReport, GradProbe};

use crate::corpus::{batch::mix, BatchStream, Corpus};
use crate::error::{Error, Result};
use crate::lens::{
    collect_samples, init_lens_with_bias, lens_params_f64, objective, InitMode, Lens,
    PositionPolicy,
};
use crate::model::ModelBundle;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;
/// Constant Adam step size used unless a run overrides it.
pub const DEFAULT_LEARNING_RATE: f64 = 5e-2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub position_policy: PositionPolicy,
    pub init_mode: InitMode,
    /// Steps per loss-history record (and per on-disk checkpoint in the CLI).
    pub checkpoint_every: usize,
    #[serde(default)]
    pub lens_bias: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 16,
            seq_len: 64,
            learning_rate: DEFAULT_LEARNING_RATE,
            seed: 0,
            position_policy: PositionPolicy::LastPosition,
            init_mode: InitMode::WarmStart,
            checkpoint_every: 100,
            lens_bias: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(Error::input("steps must be at least 1"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::input("learning_rate must be a finite non-negative number"));
        }
        if self.batch_size == 0 || self.seq_len == 0 || self.checkpoint_every == 0 {
            return Err(Error::input("batch_size, seq_len and checkpoint_every must be positive"));
        }
        Ok(())
    }
}

/// Mean training loss over one checkpoint interval ending at `step`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub mean_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub lens: Lens,
    pub history: Vec<LossRecord>,
    /// Loss of every step run in this call, in order.
    pub step_losses: Vec<f64>,
}

impl TrainOutcome {
    pub fn initial_loss(&self) -> Option<f64> {
        self.step_losses.first().copied()
    }

    /// Mean of the last `n` step losses.
    pub fn trailing_mean(&self, n: usize) -> Option<f64> {
        let n = n.min(self.step_losses.len());
        (n > 0).then(|| self.step_losses[self.step_losses.len() - n..].iter().sum::<f64>() / n as f64)
    }

    /// Mean of the first `n` step losses.
    pub fn leading_mean(&self, n: usize) -> Option<f64> {
        let n = n.min(self.step_losses.len());
        (n > 0).then(|| self.step_losses[..n].iter().sum::<f64>() / n as f64)
    }
}

pub fn head_seed(seed: u64, layer: usize, head: usize) -> u64 {
    mix(mix(seed, layer as u64), head as u64)
}

/// Step-by-step lens optimizer; `train_lens` drives it to completion.
pub struct LensTrainer<'a> {
    model: &'a ModelBundle,
    corpus_id: String,
    stream: BatchStream<'a>,
    cfg: TrainConfig,
    lens: Lens,
    opt: OptimizerState,
    step: usize,
    history: Vec<LossRecord>,
    pending: (f64, usize),
    step_losses: Vec<f64>,
}

impl<'a> LensTrainer<'a> {
    pub fn new(
        model: &'a ModelBundle,
        layer: usize,
        head: usize,
        corpus: &'a Corpus,
        cfg: &TrainConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        model.config().check_head(layer, head)?;
        check_corpus(model, corpus, cfg)?;
        let hs = head_seed(cfg.seed, layer, head);
        let lens = init_lens_with_bias(model, layer, head, cfg.init_mode, mix(hs, 2), cfg.lens_bias)?;
        let stream = BatchStream::new(corpus.train(), cfg.seq_len, cfg.batch_size, mix(hs, 1))?;
        let opt = OptimizerState::zeros(&lens);
        Ok(LensTrainer {
            model,
            corpus_id: corpus.identifier(),
            stream,
            cfg: cfg.clone(),
            lens,
            opt,
            step: 0,
            history: Vec::new(),
            pending: (0.0, 0),
            step_losses: Vec::new(),
        })
    }

    /// Continue from a checkpoint. `cfg.steps` from the checkpoint is replaced by `total_steps`.
    pub fn resume(
        model: &'a ModelBundle,
        corpus: &'a Corpus,
        ckpt: LensCheckpoint,
        total_steps: usize,
    ) -> Result<Self> {
        ckpt.lens.check_binding(model)?;
        if ckpt.model_config != *model.config() {
            return Err(Error::input("checkpoint model configuration differs from the model"));
        }
        if ckpt.lens.meta.corpus_id != corpus.identifier() {
            return Err(Error::input(format!(
                "checkpoint was trained on corpus {}, got {}",
                ckpt.lens.meta.corpus_id,
                corpus.identifier()
            )));
        }
        let mut cfg = ckpt.train_config.clone();
        cfg.steps = total_steps;
        cfg.validate()?;
        check_corpus(model, corpus, &cfg)?;
        let hs = head_seed(cfg.seed, ckpt.lens.layer, ckpt.lens.head);
        let mut stream = BatchStream::new(corpus.train(), cfg.seq_len, cfg.batch_size, mix(hs, 1))?;
        stream.seek(ckpt.step);
        Ok(LensTrainer {
            model,
            corpus_id: corpus.identifier(),
            stream,
            cfg,
            lens: ckpt.lens,
            opt: ckpt.optimizer,
            step: ckpt.step,
            history: ckpt.history,
            pending: ckpt.pending,
            step_losses: Vec::new(),
        })
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.cfg.steps
    }

    pub fn lens(&self) -> &Lens {
        &self.lens
    }

    pub fn history(&self) -> &[LossRecord] {
        &self.history
    }

    /// One optimizer update. Returns the loss measured before the update.
    pub fn step(&mut self) -> Result<f64> {
        let batch = self.stream.next().expect("stream is infinite");
        let samples = collect_samples(
            self.model,
            self.lens.layer,
            self.lens.head,
            &batch,
            self.cfg.position_policy,
        )?;
        let (m, b) = lens_params_f64(&self.lens);
        let obj = objective(&m, b.as_deref(), self.lens.vocab_size(), &samples, true).map_err(|e| {
            match e {
                Error::Divergence { message, .. } => Error::Divergence {
                    step: Some(self.step),
                    message,
                },
                other => other,
            }
        })?;
        if !obj.loss.is_finite() || obj.grad_matrix.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence {
                step: Some(self.step),
                message: format!("non-finite loss {}", obj.loss),
            });
        }

        let t = (self.step + 1) as i32;
        let lr = self.cfg.learning_rate;
        adam_update(self.lens.matrix_mut(), &obj.grad_matrix, &mut self.opt.m, &mut self.opt.v, lr, t);
        if let (Some(gb), Some(bias)) = (obj.grad_bias.as_ref(), self.lens.bias_mut()) {
            let (mb, vb) = self.opt.bias_moments_mut();
            adam_update(bias, gb, mb, vb, lr, t);
        }

        self.step += 1;
        self.step_losses.push(obj.loss);
        self.pending.0 += obj.loss;
        self.pending.1 += 1;
        if self.step.is_multiple_of(self.cfg.checkpoint_every) {
            self.flush_interval();
        }
        self.lens.meta.steps_completed = self.step;
        Ok(obj.loss)
    }

    /// Closes a partial loss interval, as `run` does once `cfg.steps` is reached.
    pub fn finish(&mut self) {
        self.flush_interval();
    }

    fn flush_interval(&mut self) {
        if self.pending.1 > 0 {
            let record = LossRecord {
                step: self.step,
                mean_loss: self.pending.0 / self.pending.1 as f64,
            };
            self.history.push(record);
            self.lens.meta.final_loss = Some(record.mean_loss);
            self.pending = (0.0, 0);
        }
    }

    pub fn checkpoint(&self) -> LensCheckpoint {
        LensCheckpoint {
            model_config: *self.model.config(),
            lens: self.lens_with_meta(),
            optimizer: self.opt.clone(),
            step: self.step,
            train_config: self.cfg.clone(),
            history: self.history.clone(),
            pending: self.pending,
        }
    }

    fn lens_with_meta(&self) -> Lens {
        let mut lens = self.lens.clone();
        lens.meta.steps_completed = self.step;
        lens.meta.corpus_id = self.corpus_id.clone();
        lens.meta.seed = self.cfg.seed;
        lens
    }

    /// Run until `cfg.steps`, then close any partial loss interval.
    pub fn run(mut self) -> Result<TrainOutcome> {
        while !self.is_done() {
            self.step()?;
        }
        self.flush_interval();
        Ok(TrainOutcome {
            lens: self.lens_with_meta(),
            history: self.history,
            step_losses: self.step_losses,
        })
    }
}

fn check_corpus(model: &ModelBundle, corpus: &Corpus, cfg: &TrainConfig) -> Result<()> {
    if cfg.seq_len > model.config().max_seq_len {
        return Err(Error::input(format!(
            "seq_len {} exceeds the model's max_seq_len {}",
            cfg.seq_len,
            model.config().max_seq_len
        )));
    }
    if let Some(max) = corpus.max_token() {
        if max as usize >= model.config().vocab_size {
            return Err(Error::input(format!(
                "corpus token {max} is outside the model vocabulary ({})",
                model.config().vocab_size
            )));
        }
    }
    Ok(())
}

fn adam_update(params: &mut [f32], grads: &[f64], m: &mut [f32], v: &mut [f32], lr: f64, t: i32) {
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        let mi = ADAM_BETA1 * f64::from(m[i]) + (1.0 - ADAM_BETA1) * g;
        let vi = ADAM_BETA2 * f64::from(v[i]) + (1.0 - ADAM_BETA2) * g * g;
        m[i] = mi as f32;
        v[i] = vi as f32;
        let update = lr * (mi / c1) / ((vi / c2).sqrt() + ADAM_EPSILON);
        params[i] = (f64::from(params[i]) - update) as f32;
    }
}

pub fn train_lens(
    model: &ModelBundle,
    layer: usize,
    head: usize,
    corpus: &Corpus,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    LensTrainer::new(model, layer, head, corpus, cfg)?.run()
}

/// Trains every head in `heads` for one layer; outcomes are returned in input order.
pub fn train_layer_group(
    model: &ModelBundle,
    layer: usize,
    heads: &[usize],
    corpus: &Corpus,
    cfg: &TrainConfig,
) -> Result<Vec<TrainOutcome>> {
    if heads.is_empty() {
        return Err(Error::input("layer group has no heads"));
    }
    for (i, &h) in heads.iter().enumerate() {
        model.config().check_head(layer, h)?;
        if heads[..i].contains(&h) {
            return Err(Error::input(format!("head {h} listed twice")));
        }
    }

    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        heads
            .par_iter()
            .map(|&h| train_lens(model, layer, h, corpus, cfg))
            .collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        heads
            .iter()
            .map(|&h| train_lens(model, layer, h, corpus, cfg))
            .collect()
    }
}
