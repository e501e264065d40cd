//! Central finite-difference check of the lens objective's analytic gradient.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::corpus::TokenBatch;
use crate::error::{Error, Result};
use crate::lens::{collect_samples, init_lens, lens_params_f64, objective, InitMode, Lens, PositionPolicy};
use crate::model::ModelBundle;

/// Below this magnitude the comparison switches from relative to absolute error.
pub const ABSOLUTE_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckOptions {
    pub step: f64,
    pub seed: u64,
    pub n_sequences: usize,
    pub seq_len: usize,
    pub init_mode: InitMode,
    pub position_policy: PositionPolicy,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-4,
            seed: 0,
            n_sequences: 2,
            seq_len: 8,
            init_mode: InitMode::Random,
            position_policy: PositionPolicy::AllPositions,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradProbe {
    pub row: usize,
    pub col: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub error: f64,
    pub relative: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub probes: Vec<GradProbe>,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

fn compare(analytic: f64, numeric: f64) -> (f64, bool) {
    let scale = analytic.abs().max(numeric.abs());
    if scale < ABSOLUTE_FLOOR {
        ((analytic - numeric).abs(), false)
    } else {
        ((analytic - numeric).abs() / scale, true)
    }
}

pub fn grad_check(
    model: &ModelBundle,
    layer: usize,
    head: usize,
    probe_dims: usize,
    tolerance: f64,
) -> Result<GradCheckReport> {
    grad_check_with(model, layer, head, probe_dims, tolerance, &GradCheckOptions::default())
}

pub fn grad_check_with(
    model: &ModelBundle,
    layer: usize,
    head: usize,
    probe_dims: usize,
    tolerance: f64,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let lens = init_lens(model, layer, head, opts.init_mode, opts.seed)?;
    let cfg = model.config();
    let seq_len = opts.seq_len.min(cfg.max_seq_len).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x6AD);
    let sequences = (0..opts.n_sequences.max(1))
        .map(|_| (0..seq_len).map(|_| rng.random_range(0..cfg.vocab_size as u32)).collect())
        .collect();
    let batch = TokenBatch::new(sequences)?;
    grad_check_lens(model, &lens, &batch, opts.position_policy, probe_dims, tolerance, opts)
}

/// Checks the gradient of an existing lens on a given batch.
pub fn grad_check_lens(
    model: &ModelBundle,
    lens: &Lens,
    batch: &TokenBatch,
    policy: PositionPolicy,
    probe_dims: usize,
    tolerance: f64,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    if probe_dims < 1 {
        return Err(Error::input("probe_dims must be at least 1"));
    }
    lens.check_binding(model)?;
    let samples = collect_samples(model, lens.layer, lens.head, batch, policy)?;
    let vocab = lens.vocab_size();
    let (matrix, bias) = lens_params_f64(lens);
    let analytic = objective(&matrix, bias.as_deref(), vocab, &samples, true)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9E0B);
    let n = probe_dims.min(matrix.len());
    let mut probes = Vec::with_capacity(n);
    for idx in sample(&mut rng, matrix.len(), n).into_iter() {
        let mut plus = matrix.clone();
        plus[idx] += opts.step;
        let mut minus = matrix.clone();
        minus[idx] -= opts.step;
        let lp = objective(&plus, bias.as_deref(), vocab, &samples, false)?.loss;
        let lm = objective(&minus, bias.as_deref(), vocab, &samples, false)?.loss;
        let numeric = (lp - lm) / (2.0 * opts.step);
        let a = analytic.grad_matrix[idx];
        let (error, relative) = compare(a, numeric);
        probes.push(GradProbe {
            row: idx / vocab,
            col: idx % vocab,
            analytic: a,
            numeric,
            error,
            relative,
        });
    }
    let max_error = probes.iter().map(|p| p.error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        passed: max_error < tolerance,
        probes,
        max_error,
        tolerance,
    })
}
