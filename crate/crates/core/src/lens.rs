//! Lenses: learned maps from one attention head's residual-stream
//! contribution to vocabulary logits, and the KL objective they are fit to.
//!
//! The objective for a lens `M` on head output `a` is
//! `KL(softmax(a·M) ‖ softmax(O))`, with the lens distribution first and the
//! model's final logits `O` second. All distribution math runs in `f64`
//! log-space; lens parameters themselves are stored as `f32`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::TokenBatch;
use crate::error::{Error, Result};
use crate::model::{forward_with_capture, ModelBundle};

/// Standard deviation of random lens initialization.
pub const RANDOM_INIT_STD: f32 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistributionKind {
    Logits,
    Probabilities,
}

/// Logits or normalized probabilities over the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenDistribution {
    values: Vec<f64>,
    kind: DistributionKind,
}

impl TokenDistribution {
    pub fn from_logits(values: Vec<f64>) -> Self {
        TokenDistribution {
            values,
            kind: DistributionKind::Logits,
        }
    }

    pub fn from_logits_f32(values: impl IntoIterator<Item = f32>) -> Self {
        Self::from_logits(values.into_iter().map(f64::from).collect())
    }

    pub fn from_probabilities(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|&p| p < 0.0 || !p.is_finite()) {
            return Err(Error::input("probabilities must be finite and non-negative"));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::input(format!("probabilities sum to {sum}, not 1")));
        }
        Ok(TokenDistribution {
            values,
            kind: DistributionKind::Probabilities,
        })
    }

    pub fn kind(&self) -> DistributionKind {
        self.kind
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Natural-log probabilities; `-inf` where a probability is exactly zero.
    pub fn log_probs(&self) -> Vec<f64> {
        match self.kind {
            DistributionKind::Logits => log_softmax(&self.values),
            DistributionKind::Probabilities => self.values.iter().map(|p| p.ln()).collect(),
        }
    }

    pub fn probabilities(&self) -> Vec<f64> {
        match self.kind {
            DistributionKind::Logits => log_softmax(&self.values).into_iter().map(f64::exp).collect(),
            DistributionKind::Probabilities => self.values.clone(),
        }
    }

    /// Scores used for ranking: raw logits, or log-probabilities.
    pub fn scores(&self) -> Vec<f64> {
        match self.kind {
            DistributionKind::Logits => self.values.clone(),
            DistributionKind::Probabilities => self.log_probs(),
        }
    }
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|&z| z - lse).collect()
}

/// `KL(p ‖ q)` in nats between two log-probability vectors.
fn kl_from_log_probs(lp: &[f64], lq: &[f64]) -> Result<f64> {
    let mut total = 0.0;
    for (&a, &b) in lp.iter().zip(lq) {
        if a == f64::NEG_INFINITY {
            continue;
        }
        if b == f64::NEG_INFINITY {
            return Err(Error::Divergence {
                step: None,
                message: "q assigns zero probability where p is positive".into(),
            });
        }
        total += a.exp() * (a - b);
    }
    Ok(total.max(0.0))
}

/// `Σ p_i ln(p_i / q_i)` with `0 · ln(0/q) = 0`; logits are softmaxed first.
pub fn kl_divergence(p: &TokenDistribution, q: &TokenDistribution) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::input(format!(
            "distribution lengths differ: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    kl_from_log_probs(&p.log_probs(), &q.log_probs())
}

/// `-Σ p_i ln q_i` in nats.
pub fn cross_entropy(p: &TokenDistribution, q: &TokenDistribution) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::input(format!(
            "distribution lengths differ: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    let mut total = 0.0;
    for (a, b) in p.log_probs().into_iter().zip(q.log_probs()) {
        if a == f64::NEG_INFINITY {
            continue;
        }
        if b == f64::NEG_INFINITY {
            return Err(Error::Divergence {
                step: None,
                message: "q assigns zero probability where p is positive".into(),
            });
        }
        total -= a.exp() * b;
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMode {
    /// Start from the model's unembedding matrix.
    WarmStart,
    /// Zero-mean Gaussian entries with std [`RANDOM_INIT_STD`].
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineMode {
    /// Final layernorm, then unembedding (standard logit lens).
    FinalLayerNorm,
    /// Unembedding applied to the raw head output.
    RawUnembedding,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PositionPolicy {
    LastPosition,
    AllPositions,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainMeta {
    pub steps_completed: usize,
    pub corpus_id: String,
    pub seed: u64,
    pub final_loss: Option<f64>,
}

/// A `d_model × vocab_size` map for one (layer, head), bound to one model.
#[derive(Debug, Clone, PartialEq)]
pub struct Lens {
    pub layer: usize,
    pub head: usize,
    d_model: usize,
    vocab_size: usize,
    /// Row-major `d_model × vocab_size`.
    matrix: Vec<f32>,
    bias: Option<Vec<f32>>,
    model_fingerprint: String,
    pub meta: TrainMeta,
}

impl Lens {
    pub fn from_parts(
        layer: usize,
        head: usize,
        d_model: usize,
        vocab_size: usize,
        matrix: Vec<f32>,
        bias: Option<Vec<f32>>,
        model_fingerprint: impl Into<String>,
    ) -> Result<Self> {
        if matrix.len() != d_model * vocab_size {
            return Err(Error::input(format!(
                "lens matrix has {} entries, expected {d_model} x {vocab_size}",
                matrix.len()
            )));
        }
        if bias.as_ref().is_some_and(|b| b.len() != vocab_size) {
            return Err(Error::input("lens bias length must equal vocab_size"));
        }
        Ok(Lens {
            layer,
            head,
            d_model,
            vocab_size,
            matrix,
            bias,
            model_fingerprint: model_fingerprint.into(),
            meta: TrainMeta::default(),
        })
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn matrix(&self) -> &[f32] {
        &self.matrix
    }

    pub fn matrix_mut(&mut self) -> &mut [f32] {
        &mut self.matrix
    }

    pub fn bias(&self) -> Option<&[f32]> {
        self.bias.as_deref()
    }

    pub fn bias_mut(&mut self) -> Option<&mut [f32]> {
        self.bias.as_deref_mut()
    }

    pub fn model_fingerprint(&self) -> &str {
        &self.model_fingerprint
    }

    pub fn check_binding(&self, model: &ModelBundle) -> Result<()> {
        if self.model_fingerprint != model.fingerprint() {
            return Err(Error::Binding {
                expected: model.fingerprint().to_string(),
                found: self.model_fingerprint.clone(),
            });
        }
        Ok(())
    }

    /// Logits for `head_output`, accumulated in `f64`.
    pub fn logits(&self, head_output: &[f32]) -> Result<Vec<f64>> {
        if head_output.len() != self.d_model {
            return Err(Error::input(format!(
                "head output has length {}, lens expects {}",
                head_output.len(),
                self.d_model
            )));
        }
        let x: Vec<f64> = head_output.iter().map(|&v| f64::from(v)).collect();
        let mut out = project(&x, &self.matrix, self.vocab_size);
        if let Some(b) = &self.bias {
            out.iter_mut().zip(b).for_each(|(o, &b)| *o += f64::from(b));
        }
        Ok(out)
    }
}

/// `x · M` for a row-major `x.len() × vocab` matrix.
pub(crate) fn project<T: Copy + Into<f64>>(x: &[f64], matrix: &[T], vocab: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; vocab];
    for (&xi, row) in x.iter().zip(matrix.chunks_exact(vocab)) {
        if xi == 0.0 {
            continue;
        }
        for (o, &m) in out.iter_mut().zip(row) {
            *o += xi * m.into();
        }
    }
    out
}

pub fn apply_lens(lens: &Lens, head_output: &[f32]) -> Result<TokenDistribution> {
    Ok(TokenDistribution::from_logits(lens.logits(head_output)?))
}

pub fn baseline_projection(
    model: &ModelBundle,
    head_output: &[f32],
    mode: BaselineMode,
) -> Result<TokenDistribution> {
    let cfg = model.config();
    if head_output.len() != cfg.d_model {
        return Err(Error::input(format!(
            "head output has length {}, model hidden size is {}",
            head_output.len(),
            cfg.d_model
        )));
    }
    let x: Vec<f64> = head_output.iter().map(|&v| f64::from(v)).collect();
    let x = match mode {
        BaselineMode::RawUnembedding => x,
        BaselineMode::FinalLayerNorm => {
            let (gain, bias) = model.final_ln();
            let d = x.len() as f64;
            let mean = x.iter().sum::<f64>() / d;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let rstd = 1.0 / (var + f64::from(cfg.layernorm_epsilon)).sqrt();
            x.iter()
                .zip(gain.iter().zip(bias.iter()))
                .map(|(v, (&g, &b))| (v - mean) * rstd * f64::from(g) + f64::from(b))
                .collect()
        }
    };
    let unembed = model.unembedding().as_slice().expect("standard layout");
    Ok(TokenDistribution::from_logits(project(&x, unembed, cfg.vocab_size)))
}

pub fn init_lens(
    model: &ModelBundle,
    layer: usize,
    head: usize,
    mode: InitMode,
    seed: u64,
) -> Result<Lens> {
    init_lens_with_bias(model, layer, head, mode, seed, false)
}

/// As [`init_lens`], optionally adding a zero-initialized bias vector.
pub fn init_lens_with_bias(
    model: &ModelBundle,
    layer: usize,
    head: usize,
    mode: InitMode,
    seed: u64,
    with_bias: bool,
) -> Result<Lens> {
    let cfg = model.config();
    cfg.check_head(layer, head)?;
    let matrix = match mode {
        InitMode::WarmStart => model.unembedding().as_slice().expect("standard layout").to_vec(),
        InitMode::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let normal = Normal::new(0.0f32, RANDOM_INIT_STD).expect("valid std");
            (0..cfg.d_model * cfg.vocab_size)
                .map(|_| normal.sample(&mut rng))
                .collect()
        }
    };
    let bias = with_bias.then(|| vec![0.0f32; cfg.vocab_size]);
    Lens::from_parts(
        layer,
        head,
        cfg.d_model,
        cfg.vocab_size,
        matrix,
        bias,
        model.fingerprint(),
    )
}

/// One (head output, model output) pair entering the objective.
#[derive(Debug, Clone, PartialEq)]
pub struct LensSample {
    pub head_output: Vec<f64>,
    pub target_log_probs: Vec<f64>,
}

/// Runs the model on every sequence and gathers the positions selected by `policy`.
pub fn collect_samples(
    model: &ModelBundle,
    layer: usize,
    head: usize,
    batch: &TokenBatch,
    policy: PositionPolicy,
) -> Result<Vec<LensSample>> {
    model.config().check_head(layer, head)?;
    let per_seq = |seq: &Vec<u32>| -> Result<Vec<LensSample>> {
        let result = forward_with_capture(model, seq, true)?;
        let positions = match policy {
            PositionPolicy::LastPosition => seq.len() - 1..seq.len(),
            PositionPolicy::AllPositions => 0..seq.len(),
        };
        positions
            .map(|p| {
                Ok(LensSample {
                    head_output: result
                        .head_contribution(layer, head, p)?
                        .iter()
                        .map(|&v| f64::from(v))
                        .collect(),
                    target_log_probs: result.output(p)?.log_probs(),
                })
            })
            .collect()
    };

    #[cfg(feature = "parallel")]
    let parts: Vec<Result<Vec<LensSample>>> = {
        use rayon::prelude::*;
        batch.sequences.par_iter().map(per_seq).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let parts: Vec<Result<Vec<LensSample>>> = batch.sequences.iter().map(per_seq).collect();

    let mut samples = Vec::new();
    for p in parts {
        samples.extend(p?);
    }
    if samples.is_empty() {
        return Err(Error::input("position policy selected no positions"));
    }
    Ok(samples)
}

/// Loss value and analytic gradients of the mean KL objective.
#[derive(Debug, Clone, PartialEq)]
pub struct Objective {
    pub loss: f64,
    pub grad_matrix: Vec<f64>,
    pub grad_bias: Option<Vec<f64>>,
}

/// Mean over samples of `KL(softmax(x·M + b) ‖ target)`, with gradients.
///
/// For `p = softmax(z)` and a fixed target `q`, `∂KL/∂z_j = p_j (ln p_j − ln q_j − KL)`.
pub fn objective(
    matrix: &[f64],
    bias: Option<&[f64]>,
    vocab: usize,
    samples: &[LensSample],
    with_grad: bool,
) -> Result<Objective> {
    if samples.is_empty() {
        return Err(Error::input("objective needs at least one sample"));
    }
    let d = matrix.len() / vocab;
    let n = samples.len() as f64;
    let mut loss = 0.0;
    let mut grad_matrix = if with_grad { vec![0.0; matrix.len()] } else { Vec::new() };
    let mut grad_bias = (with_grad && bias.is_some()).then(|| vec![0.0; vocab]);

    for s in samples {
        if s.head_output.len() != d || s.target_log_probs.len() != vocab {
            return Err(Error::input("sample dimensions do not match the lens"));
        }
        let mut z = project(&s.head_output, matrix, vocab);
        if let Some(b) = bias {
            z.iter_mut().zip(b).for_each(|(zi, bi)| *zi += bi);
        }
        let lp = log_softmax(&z);
        let kl = kl_from_log_probs(&lp, &s.target_log_probs)?;
        loss += kl;
        if with_grad {
            let g: Vec<f64> = lp
                .iter()
                .zip(&s.target_log_probs)
                .map(|(&a, &b)| a.exp() * (a - b - kl) / n)
                .collect();
            for (&xi, row) in s.head_output.iter().zip(grad_matrix.chunks_exact_mut(vocab)) {
                if xi == 0.0 {
                    continue;
                }
                for (r, gj) in row.iter_mut().zip(&g) {
                    *r += xi * gj;
                }
            }
            if let Some(gb) = grad_bias.as_mut() {
                gb.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
            }
        }
    }
    Ok(Objective {
        loss: loss / n,
        grad_matrix,
        grad_bias,
    })
}

pub(crate) fn lens_params_f64(lens: &Lens) -> (Vec<f64>, Option<Vec<f64>>) {
    (
        lens.matrix.iter().map(|&v| f64::from(v)).collect(),
        lens.bias.as_ref().map(|b| b.iter().map(|&v| f64::from(v)).collect()),
    )
}

/// Mean `KL(lens ‖ model output)` over the positions `policy` selects in `batch`.
pub fn lens_loss(
    lens: &Lens,
    model: &ModelBundle,
    batch: &TokenBatch,
    policy: PositionPolicy,
) -> Result<f64> {
    lens.check_binding(model)?;
    let samples = collect_samples(model, lens.layer, lens.head, batch, policy)?;
    let (m, b) = lens_params_f64(lens);
    Ok(objective(&m, b.as_deref(), lens.vocab_size, &samples, false)?.loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, Weights};
    use proptest::prelude::*;

    fn probs(v: &[f64]) -> TokenDistribution {
        TokenDistribution::from_probabilities(v.to_vec()).unwrap()
    }

    fn tiny_lens(d: usize, v: usize, matrix: Vec<f32>) -> Lens {
        Lens::from_parts(0, 0, d, v, matrix, None, "fp").unwrap()
    }

    #[test]
    fn identity_lens_passes_input_through() {
        let lens = tiny_lens(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let out = apply_lens(&lens, &[0.3, -0.7]).unwrap();
        assert_eq!(out.values(), &[0.3f32 as f64, -0.7f32 as f64]);
        assert_eq!(out.kind(), DistributionKind::Logits);
    }

    #[test]
    fn zero_input_gives_zero_logits() {
        let lens = tiny_lens(3, 4, (0..12).map(|i| i as f32).collect());
        assert!(apply_lens(&lens, &[0.0; 3]).unwrap().values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_matrix_product() {
        let lens = tiny_lens(2, 3, vec![1.0, 0.0, 2.0, 0.0, 1.0, -1.0]);
        let out = apply_lens(&lens, &[2.0, 3.0]).unwrap();
        assert_eq!(out.values(), &[2.0, 3.0, 1.0]);
        assert!(matches!(apply_lens(&lens, &[1.0]), Err(Error::Input(_))));
    }

    #[test]
    fn kl_hand_values() {
        let expected = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        let got = kl_divergence(&probs(&[0.5, 0.5]), &probs(&[0.9, 0.1])).unwrap();
        assert!((got - expected).abs() < 1e-12);
        assert!((got - 0.5108).abs() < 1e-4);
        let got = kl_divergence(&probs(&[1.0, 0.0]), &probs(&[0.5, 0.5])).unwrap();
        assert!((got - 2f64.ln()).abs() < 1e-12);
        let p = probs(&[0.2, 0.3, 0.5]);
        assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn kl_error_paths() {
        assert!(matches!(
            kl_divergence(&probs(&[0.5, 0.5]), &probs(&[1.0, 0.0])),
            Err(Error::Divergence { .. })
        ));
        assert!(matches!(
            kl_divergence(&probs(&[0.5, 0.5]), &probs(&[0.2, 0.3, 0.5])),
            Err(Error::Input(_))
        ));
        assert!(TokenDistribution::from_probabilities(vec![0.5, 0.6]).is_err());
        assert!(TokenDistribution::from_probabilities(vec![1.5, -0.5]).is_err());
    }

    #[test]
    fn kl_is_stable_for_extreme_logits() {
        let p = TokenDistribution::from_logits(vec![0.0, 1000.0, -1000.0]);
        let q = TokenDistribution::from_logits(vec![5.0, 900.0, -800.0]);
        let kl = kl_divergence(&p, &q).unwrap();
        assert!(kl.is_finite() && kl >= 0.0);
    }

    #[test]
    fn kl_is_asymmetric() {
        let p = probs(&[0.8, 0.15, 0.05]);
        let q = probs(&[0.3, 0.3, 0.4]);
        let a = kl_divergence(&p, &q).unwrap();
        let b = kl_divergence(&q, &p).unwrap();
        assert!((a - b).abs() > 1e-3);
    }

    fn small_model() -> ModelBundle {
        let cfg = ModelConfig::new(1, 2, 4, 6, 8).unwrap();
        ModelBundle::new(cfg, Weights::random(&cfg, 11, 0.5))
    }

    #[test]
    fn init_modes() {
        let model = small_model();
        let warm = init_lens(&model, 0, 1, InitMode::WarmStart, 0).unwrap();
        assert_eq!(warm.matrix(), model.unembedding().as_slice().unwrap());
        let x = [0.1f32, -0.2, 0.3, 0.4];
        let raw = baseline_projection(&model, &x, BaselineMode::RawUnembedding).unwrap();
        assert_eq!(apply_lens(&warm, &x).unwrap(), raw);

        let a = init_lens(&model, 0, 0, InitMode::Random, 5).unwrap();
        let b = init_lens(&model, 0, 0, InitMode::Random, 5).unwrap();
        let c = init_lens(&model, 0, 0, InitMode::Random, 6).unwrap();
        assert_eq!(a.matrix(), b.matrix());
        assert!(a.matrix().iter().zip(c.matrix()).any(|(x, y)| x != y));
        assert!(matches!(
            init_lens(&model, 0, 2, InitMode::Random, 0),
            Err(Error::Index { what: "head", .. })
        ));
        assert!(init_lens(&model, 1, 0, InitMode::Random, 0).is_err());
    }

    #[test]
    fn baseline_of_zero_is_bias_image() {
        let cfg = ModelConfig::new(1, 2, 4, 6, 8).unwrap();
        let mut w = Weights::random(&cfg, 1, 0.5);
        w.final_ln_bias = ndarray::Array1::from(vec![0.5, -1.0, 0.25, 2.0]);
        let model = ModelBundle::new(cfg, w);
        let out = baseline_projection(&model, &[0.0; 4], BaselineMode::FinalLayerNorm).unwrap();
        let bias: Vec<f64> = model.final_ln().1.iter().map(|&b| b as f64).collect();
        let expected = project(&bias, model.unembedding().as_slice().unwrap(), 6);
        assert_eq!(out.values(), expected.as_slice());
    }

    #[test]
    fn perfect_lens_has_zero_loss() {
        // target equals the lens distribution -> KL 0
        let lens = tiny_lens(2, 3, vec![1.0, 0.5, -1.0, 0.0, 2.0, 0.3]);
        let x = vec![0.7, -0.2];
        let target = log_softmax(&project(&x, lens.matrix(), 3));
        let samples = vec![LensSample {
            head_output: x,
            target_log_probs: target,
        }];
        let (m, _) = lens_params_f64(&lens);
        let obj = objective(&m, None, 3, &samples, true).unwrap();
        assert!(obj.loss.abs() < 1e-15);
        assert!(obj.grad_matrix.iter().all(|g| g.abs() < 1e-15));
    }

    #[test]
    fn objective_matches_hand_two_token_case() {
        // d=2, |V|=2, M = [[1,2],[3,4]], x = (0.5, -1) -> z = (-2.5, -3)
        let m = vec![1.0, 2.0, 3.0, 4.0];
        let x = vec![0.5, -1.0];
        let target_logits = [0.2f64, -0.4];
        let samples = vec![LensSample {
            head_output: x,
            target_log_probs: log_softmax(&target_logits),
        }];
        let obj = objective(&m, None, 2, &samples, false).unwrap();
        let p1 = 1.0 / (1.0 + (-3.0f64 + 2.5).exp());
        let p = [p1, 1.0 - p1];
        let q1 = 1.0 / (1.0 + (-0.4f64 - 0.2).exp());
        let q = [q1, 1.0 - q1];
        let expected = p[0] * (p[0] / q[0]).ln() + p[1] * (p[1] / q[1]).ln();
        assert!((obj.loss - expected).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences_with_bias() {
        let d = 4;
        let v = 6;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let m: Vec<f64> = (0..d * v).map(|_| normal.sample(&mut rng)).collect();
        let b: Vec<f64> = (0..v).map(|_| normal.sample(&mut rng)).collect();
        let samples: Vec<LensSample> = (0..3)
            .map(|_| LensSample {
                head_output: (0..d).map(|_| normal.sample(&mut rng)).collect(),
                target_log_probs: log_softmax(&(0..v).map(|_| normal.sample(&mut rng)).collect::<Vec<_>>()),
            })
            .collect();
        let obj = objective(&m, Some(&b), v, &samples, true).unwrap();
        let h = 1e-5;
        for i in 0..v {
            let mut bp = b.clone();
            bp[i] += h;
            let mut bm = b.clone();
            bm[i] -= h;
            let num = (objective(&m, Some(&bp), v, &samples, false).unwrap().loss
                - objective(&m, Some(&bm), v, &samples, false).unwrap().loss)
                / (2.0 * h);
            let ana = obj.grad_bias.as_ref().unwrap()[i];
            assert!((num - ana).abs() < 1e-8, "bias {i}: {num} vs {ana}");
        }
    }

    #[test]
    fn lens_loss_binding_is_checked() {
        let model = small_model();
        let other = ModelBundle::random(*model.config(), 99);
        let lens = init_lens(&other, 0, 0, InitMode::WarmStart, 0).unwrap();
        let batch = TokenBatch::new(vec![vec![1, 2, 3]]).unwrap();
        assert!(matches!(
            lens_loss(&lens, &model, &batch, PositionPolicy::LastPosition),
            Err(Error::Binding { .. })
        ));
    }

    proptest! {
        #[test]
        fn kl_nonnegative_and_zero_on_identity(
            raw_p in proptest::collection::vec(0.0f64..1.0, 2..12),
            raw_q in proptest::collection::vec(0.01f64..1.0, 12),
        ) {
            let sp: f64 = raw_p.iter().sum::<f64>() + 1e-3;
            let p: Vec<f64> = raw_p.iter().map(|x| (x + 1e-3 / raw_p.len() as f64) / sp).collect();
            let q: Vec<f64> = raw_q[..p.len()].iter().map(|x| x / raw_q[..p.len()].iter().sum::<f64>()).collect();
            let (p, q) = (probs(&p), probs(&q));
            prop_assert!(kl_divergence(&p, &q).unwrap() >= 0.0);
            prop_assert!(kl_divergence(&p, &p).unwrap().abs() < 1e-9);
        }

        #[test]
        fn softmax_shift_invariance(
            logits in proptest::collection::vec(-20.0f64..20.0, 2..40),
            shift in -50.0f64..50.0,
        ) {
            let a = TokenDistribution::from_logits(logits.clone());
            let b = TokenDistribution::from_logits(logits.iter().map(|z| z + shift).collect());
            for (x, y) in a.probabilities().iter().zip(b.probabilities()) {
                prop_assert!((x - y).abs() < 1e-7);
            }
            prop_assert!(kl_divergence(&a, &b).unwrap() < 1e-9);
        }

        #[test]
        fn lens_is_linear(
            x in proptest::collection::vec(-2.0f32..2.0, 4),
            y in proptest::collection::vec(-2.0f32..2.0, 4),
            alpha in -3.0f32..3.0,
            beta in -3.0f32..3.0,
        ) {
            let model = small_model();
            let lens = init_lens(&model, 0, 0, InitMode::Random, 1).unwrap();
            let combo: Vec<f32> = x.iter().zip(&y).map(|(a, b)| alpha * a + beta * b).collect();
            let lhs = lens.logits(&combo).unwrap();
            let lx = lens.logits(&x).unwrap();
            let ly = lens.logits(&y).unwrap();
            for j in 0..lhs.len() {
                let rhs = alpha as f64 * lx[j] + beta as f64 * ly[j];
                prop_assert!((lhs[j] - rhs).abs() < 1e-5);
            }
        }
    }
}
