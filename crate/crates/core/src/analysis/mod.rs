//! Readouts built on trained lenses: paired lens/baseline inspection,
//! flagged-vocabulary scans, cross-lens transfer divergence and held-out
//! evaluation against the unembedding baseline.

mod report;
mod topk;

use serde::{Deserialize, Serialize};

pub use report::{Report, REPORT_FORMAT};
pub use topk::{top_k_tokens, TopKEntry, TopKReport};

use crate::corpus::Tokenizer;
use crate::error::{Error, Result};
use crate::lens::{apply_lens, baseline_projection, cross_entropy, kl_divergence, BaselineMode, Lens};
use crate::model::{check_tokens, forward_with_capture, ModelBundle};

/// `k` used when the caller does not choose one.
pub const DEFAULT_K: usize = 50;

/// Lens and baseline top-k for one head at one position of a prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadInspection {
    pub prompt: String,
    pub prompt_tokens: Vec<u32>,
    pub layer: usize,
    pub head: usize,
    pub position: usize,
    pub k: usize,
    pub baseline_mode: BaselineMode,
    pub lens: TopKReport,
    pub baseline: TopKReport,
    /// `KL(lens ‖ model output)` at the inspected position.
    pub lens_kl: f64,
    /// `KL(baseline ‖ model output)` at the inspected position.
    pub baseline_kl: f64,
}

pub(crate) fn encode_prompt(model: &ModelBundle, tokenizer: &Tokenizer, prompt: &str) -> Result<Vec<u32>> {
    let tokens = tokenizer.encode(prompt);
    if tokens.is_empty() {
        return Err(Error::input("prompt is empty"));
    }
    check_tokens(model.config(), &tokens)?;
    Ok(tokens)
}

pub fn inspect_head(
    model: &ModelBundle,
    tokenizer: &Tokenizer,
    lens: &Lens,
    prompt: &str,
    position: Option<usize>,
    k: usize,
    baseline_mode: BaselineMode,
) -> Result<HeadInspection> {
    lens.check_binding(model)?;
    let tokens = encode_prompt(model, tokenizer, prompt)?;
    let position = position.unwrap_or(tokens.len() - 1);
    if position >= tokens.len() {
        return Err(Error::index("position", position, tokens.len()));
    }
    let result = forward_with_capture(model, &tokens, true)?;
    let a = result.head_contribution(lens.layer, lens.head, position)?;
    let lens_dist = apply_lens(lens, a)?;
    let base_dist = baseline_projection(model, a, baseline_mode)?;
    let output = result.output(position)?;
    let report = |entries| TopKReport {
        layer: lens.layer,
        head: lens.head,
        position,
        k,
        entries,
    };
    Ok(HeadInspection {
        prompt: prompt.to_string(),
        prompt_tokens: tokens,
        layer: lens.layer,
        head: lens.head,
        position,
        k,
        baseline_mode,
        lens: report(top_k_tokens(&lens_dist, tokenizer, k)?),
        baseline: report(top_k_tokens(&base_dist, tokenizer, k)?),
        lens_kl: kl_divergence(&lens_dist, &output)?,
        baseline_kl: kl_divergence(&base_dist, &output)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanHit {
    pub token: String,
    pub token_id: u32,
    /// 1-based rank within the head's top-k.
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadHits {
    pub layer: usize,
    pub head: usize,
    pub hits: Vec<ScanHit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanCoverage {
    pub heads_scanned: usize,
    pub heads_with_hits: usize,
    pub total_hits: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanReport {
    pub prompt: String,
    pub position: usize,
    pub k: usize,
    pub flagged_vocab: Vec<String>,
    /// Flagged strings that were skipped because they are not a single token.
    pub warnings: Vec<String>,
    /// Heads with at least one hit, ordered by (layer, head).
    pub hits: Vec<HeadHits>,
    pub coverage: ScanCoverage,
    /// The top-k readout of every scanned head, for cross-checking hits.
    pub top_k: Vec<TopKReport>,
}

/// Sweeps each lens's top-k at the last prompt position for flagged tokens.
pub fn scan_prompt(
    model: &ModelBundle,
    tokenizer: &Tokenizer,
    lenses: &[Lens],
    prompt: &str,
    flagged_vocab: &[String],
    k: usize,
) -> Result<ScanReport> {
    for lens in lenses {
        lens.check_binding(model)?;
    }
    let tokens = encode_prompt(model, tokenizer, prompt)?;
    let position = tokens.len() - 1;

    let mut warnings = Vec::new();
    let mut flagged_ids: Vec<(u32, &str)> = Vec::new();
    for s in flagged_vocab {
        match tokenizer.single_token(s) {
            Some(id) if (id as usize) < model.config().vocab_size => flagged_ids.push((id, s)),
            _ => warnings.push(format!("{s:?} is not a single token; skipped")),
        }
    }

    let result = forward_with_capture(model, &tokens, true)?;
    let mut ordered: Vec<&Lens> = lenses.iter().collect();
    ordered.sort_by_key(|l| (l.layer, l.head));

    let mut hits = Vec::new();
    let mut top_k = Vec::new();
    for lens in ordered {
        let a = result.head_contribution(lens.layer, lens.head, position)?;
        let report = TopKReport {
            layer: lens.layer,
            head: lens.head,
            position,
            k,
            entries: top_k_tokens(&apply_lens(lens, a)?, tokenizer, k)?,
        };
        let mut head_hits: Vec<ScanHit> = flagged_ids
            .iter()
            .filter_map(|&(id, s)| {
                report.rank_of(id).map(|rank| ScanHit {
                    token: s.to_string(),
                    token_id: id,
                    rank,
                })
            })
            .collect();
        head_hits.sort_by_key(|h| (h.rank, h.token_id));
        head_hits.dedup_by_key(|h| h.token_id);
        if !head_hits.is_empty() {
            hits.push(HeadHits {
                layer: lens.layer,
                head: lens.head,
                hits: head_hits,
            });
        }
        top_k.push(report);
    }
    let coverage = ScanCoverage {
        heads_scanned: top_k.len(),
        heads_with_hits: hits.len(),
        total_hits: hits.iter().map(|h| h.hits.len()).sum(),
    };
    Ok(ScanReport {
        prompt: prompt.to_string(),
        position,
        k,
        flagged_vocab: flagged_vocab.to_vec(),
        warnings,
        hits,
        coverage,
        top_k,
    })
}

/// Disagreement between two lenses' distributions over shared inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferEntry {
    pub layer_a: usize,
    pub head_a: usize,
    pub layer_b: usize,
    pub head_b: usize,
    pub n_eval: usize,
    /// Mean `KL(a ‖ b)`.
    pub kl_ab: f64,
    /// Mean `KL(b ‖ a)`.
    pub kl_ba: f64,
    /// Mean `H(a, b) = −Σ a ln b`.
    pub cross_entropy_ab: f64,
    pub cross_entropy_ba: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub model_fingerprint: String,
    pub entries: Vec<TransferEntry>,
}

pub fn transfer_divergence(lens_a: &Lens, lens_b: &Lens, eval_head_outputs: &[Vec<f32>]) -> Result<TransferEntry> {
    if lens_a.d_model() != lens_b.d_model() || lens_a.vocab_size() != lens_b.vocab_size() {
        return Err(Error::input("lenses disagree on d_model or vocab_size"));
    }
    if eval_head_outputs.is_empty() {
        return Err(Error::input("evaluation set is empty"));
    }
    let mut sums = [0.0f64; 4];
    for x in eval_head_outputs {
        let pa = apply_lens(lens_a, x)?;
        let pb = apply_lens(lens_b, x)?;
        sums[0] += kl_divergence(&pa, &pb)?;
        sums[1] += kl_divergence(&pb, &pa)?;
        sums[2] += cross_entropy(&pa, &pb)?;
        sums[3] += cross_entropy(&pb, &pa)?;
    }
    let n = eval_head_outputs.len() as f64;
    let entry = TransferEntry {
        layer_a: lens_a.layer,
        head_a: lens_a.head,
        layer_b: lens_b.layer,
        head_b: lens_b.head,
        n_eval: eval_head_outputs.len(),
        kl_ab: sums[0] / n,
        kl_ba: sums[1] / n,
        cross_entropy_ab: sums[2] / n,
        cross_entropy_ba: sums[3] / n,
    };
    if [entry.kl_ab, entry.kl_ba, entry.cross_entropy_ab, entry.cross_entropy_ba]
        .iter()
        .any(|v| !v.is_finite())
    {
        return Err(Error::Divergence {
            step: None,
            message: "transfer divergence is not finite".into(),
        });
    }
    Ok(entry)
}

/// Last-position head outputs of `(layer, head)` for each window.
pub fn head_outputs(model: &ModelBundle, layer: usize, head: usize, windows: &[Vec<u32>]) -> Result<Vec<Vec<f32>>> {
    model.config().check_head(layer, head)?;
    windows
        .iter()
        .map(|w| {
            let r = forward_with_capture(model, w, true)?;
            Ok(r.head_contribution(layer, head, w.len() - 1)?.to_vec())
        })
        .collect()
}

/// All ordered lens pairs; pair `(a, b)` is evaluated on head `a`'s outputs.
pub fn transfer_matrix(model: &ModelBundle, lenses: &[Lens], windows: &[Vec<u32>]) -> Result<TransferReport> {
    for lens in lenses {
        lens.check_binding(model)?;
    }
    let mut ordered: Vec<&Lens> = lenses.iter().collect();
    ordered.sort_by_key(|l| (l.layer, l.head));
    let results = windows
        .iter()
        .map(|w| forward_with_capture(model, w, true))
        .collect::<Result<Vec<_>>>()?;
    let mut entries = Vec::with_capacity(ordered.len() * ordered.len());
    for a in &ordered {
        let inputs = results
            .iter()
            .zip(windows)
            .map(|(r, w)| Ok(r.head_contribution(a.layer, a.head, w.len() - 1)?.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        for b in &ordered {
            entries.push(transfer_divergence(a, b, &inputs)?);
        }
    }
    Ok(TransferReport {
        model_fingerprint: model.fingerprint().to_string(),
        entries,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadEval {
    pub layer: usize,
    pub head: usize,
    /// Mean `KL(lens ‖ model output)`.
    pub lens_kl: f64,
    /// Mean `KL(baseline ‖ model output)`.
    pub baseline_kl: f64,
    pub lens_better: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_fingerprint: String,
    pub baseline_mode: BaselineMode,
    pub n_eval: usize,
    pub heads: Vec<HeadEval>,
    pub lens_better_count: usize,
}

impl EvalReport {
    pub fn lens_better_fraction(&self) -> f64 {
        if self.heads.is_empty() {
            0.0
        } else {
            self.lens_better_count as f64 / self.heads.len() as f64
        }
    }
}

/// Compares each lens with the baseline at the last position of every window.
pub fn evaluate_lenses(
    model: &ModelBundle,
    lenses: &[Lens],
    windows: &[Vec<u32>],
    baseline_mode: BaselineMode,
) -> Result<EvalReport> {
    if windows.is_empty() {
        return Err(Error::input("evaluation set is empty"));
    }
    for lens in lenses {
        lens.check_binding(model)?;
    }
    let mut ordered: Vec<&Lens> = lenses.iter().collect();
    ordered.sort_by_key(|l| (l.layer, l.head));
    let mut sums = vec![(0.0f64, 0.0f64); ordered.len()];
    for w in windows {
        let r = forward_with_capture(model, w, true)?;
        let p = w.len() - 1;
        let output = r.output(p)?;
        for (lens, acc) in ordered.iter().zip(sums.iter_mut()) {
            let a = r.head_contribution(lens.layer, lens.head, p)?;
            acc.0 += kl_divergence(&apply_lens(lens, a)?, &output)?;
            acc.1 += kl_divergence(&baseline_projection(model, a, baseline_mode)?, &output)?;
        }
    }
    let n = windows.len() as f64;
    let heads: Vec<HeadEval> = ordered
        .iter()
        .zip(sums)
        .map(|(lens, (l, b))| HeadEval {
            layer: lens.layer,
            head: lens.head,
            lens_kl: l / n,
            baseline_kl: b / n,
            lens_better: l < b,
        })
        .collect();
    Ok(EvalReport {
        model_fingerprint: model.fingerprint().to_string(),
        baseline_mode,
        n_eval: windows.len(),
        lens_better_count: heads.iter().filter(|h| h.lens_better).count(),
        heads,
    })
}
