use serde::{Deserialize, Serialize};

use crate::corpus::Tokenizer;
use crate::error::{Error, Result};
use crate::lens::TokenDistribution;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopKEntry {
    pub token_id: u32,
    pub token: String,
    pub logit: f64,
    /// Softmax over the full vocabulary, not renormalized over the k entries.
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopKReport {
    pub layer: usize,
    pub head: usize,
    pub position: usize,
    pub k: usize,
    pub entries: Vec<TopKEntry>,
}

impl TopKReport {
    pub fn rank_of(&self, token_id: u32) -> Option<usize> {
        self.entries
            .iter()
            .position(|e| e.token_id == token_id)
            .map(|i| i + 1)
    }
}

/// The `k` highest-scoring tokens, by score descending then id ascending.
pub fn top_k_tokens(dist: &TokenDistribution, tokenizer: &Tokenizer, k: usize) -> Result<Vec<TopKEntry>> {
    if k < 1 || k > dist.len() {
        return Err(Error::input(format!(
            "k must be between 1 and {} (got {k})",
            dist.len()
        )));
    }
    let scores = dist.scores();
    let probs = dist.probabilities();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    let by_rank = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
    if k < order.len() {
        order.select_nth_unstable_by(k - 1, by_rank);
        order.truncate(k);
    }
    order.sort_by(by_rank);
    Ok(order
        .into_iter()
        .map(|i| TopKEntry {
            token_id: i as u32,
            token: tokenizer.token_str(i as u32),
            logit: scores[i],
            probability: probs[i],
        })
        .collect())
}
