//! Text ingestion, tokenization and deterministic batching.

pub(crate) mod batch;
pub mod synthetic;
mod tokenizer;

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub use batch::{batch_stream, BatchStream, TokenBatch};
pub use tokenizer::{Tokenizer, BOS, EOS, MIN_VOCAB};

use crate::error::{Error, Result};

/// Fraction of tokens reserved as the held-out tail by default.
pub const DEFAULT_HELDOUT_FRACTION: f64 = 0.1;

/// A tokenized text split into a training prefix and a held-out suffix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    source: String,
    tokens: Vec<u32>,
    split: usize,
}

impl Corpus {
    pub fn new(source: impl Into<String>, tokens: Vec<u32>, heldout_fraction: f64) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::input("corpus is empty"));
        }
        if !(0.0..1.0).contains(&heldout_fraction) {
            return Err(Error::input("held-out fraction must be in [0, 1)"));
        }
        let heldout = (tokens.len() as f64 * heldout_fraction).round() as usize;
        let split = tokens.len() - heldout;
        Ok(Corpus {
            source: source.into(),
            tokens,
            split,
        })
    }

    pub fn from_text(source: impl Into<String>, text: &str, tokenizer: &Tokenizer) -> Result<Self> {
        Self::new(source, tokenizer.encode(text), DEFAULT_HELDOUT_FRACTION)
    }

    pub fn from_file(path: &Path, tokenizer: &Tokenizer) -> Result<Self> {
        let text = read_text(path)?;
        let name = path.file_name().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned());
        Self::from_text(name, &text, tokenizer)
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    /// Source name plus a short content hash of the token ids.
    pub fn identifier(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.to_le_bytes());
        }
        let digest = hex::encode(h.finalize());
        format!("{}#{}", self.source, &digest[..12])
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn train(&self) -> &[u32] {
        &self.tokens[..self.split]
    }

    pub fn heldout(&self) -> &[u32] {
        &self.tokens[self.split..]
    }

    pub fn max_token(&self) -> Option<u32> {
        self.tokens.iter().copied().max()
    }

    /// `count` windows of `seq_len` tokens drawn without replacement (when
    /// possible) from the held-out slice, in a seed-determined order.
    pub fn heldout_windows(&self, seq_len: usize, count: usize, seed: u64) -> Result<Vec<Vec<u32>>> {
        let held = self.heldout();
        if seq_len == 0 || held.len() < seq_len {
            return Err(Error::input(format!(
                "held-out slice has {} tokens, need at least {seq_len}",
                held.len()
            )));
        }
        let n_offsets = held.len() - seq_len + 1;
        let mut offsets: Vec<usize> = (0..n_offsets).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        offsets.shuffle(&mut rng);
        Ok((0..count)
            .map(|i| {
                let o = offsets[i % n_offsets];
                held[o..o + seq_len].to_vec()
            })
            .collect())
    }
}

pub fn read_text(path: &Path) -> Result<String> {
    match fs::read_to_string(path) {
        Ok(t) => Ok(t),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            Err(Error::MissingFile(path.to_path_buf()))
        }
        Err(e) if e.kind() == std::io::ErrorKind::InvalidData => {
            Err(Error::input(format!("{} is not valid UTF-8", path.display())))
        }
        Err(e) => Err(e.into()),
    }
}
