use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Corpus;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    pub sequences: Vec<Vec<u32>>,
    pub seq_len: usize,
}

impl TokenBatch {
    pub fn new(sequences: Vec<Vec<u32>>) -> Result<Self> {
        let seq_len = sequences.first().map(Vec::len).unwrap_or(0);
        if seq_len == 0 {
            return Err(Error::input("batch must contain non-empty sequences"));
        }
        if sequences.iter().any(|s| s.len() != seq_len) {
            return Err(Error::input("all sequences in a batch must have the same length"));
        }
        Ok(TokenBatch { sequences, seq_len })
    }

    pub fn batch_size(&self) -> usize {
        self.sequences.len()
    }
}

/// Seeded, random-access stream of training windows.
///
/// Every window offset of the training slice is visited once per epoch in a
/// permutation seeded by `(seed, epoch)`. Batch `i` is a pure function of the
/// corpus, shape and seed, which is what makes lens training resumable.
#[derive(Debug, Clone)]
pub struct BatchStream<'a> {
    tokens: &'a [u32],
    seq_len: usize,
    batch_size: usize,
    seed: u64,
    n_windows: usize,
    next: usize,
    perm: Option<(usize, Vec<usize>)>,
}

pub fn batch_stream(corpus: &Corpus, seq_len: usize, batch_size: usize, seed: u64) -> Result<BatchStream<'_>> {
    BatchStream::new(corpus.train(), seq_len, batch_size, seed)
}

impl<'a> BatchStream<'a> {
    pub fn new(tokens: &'a [u32], seq_len: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if seq_len == 0 || batch_size == 0 {
            return Err(Error::input("seq_len and batch_size must be positive"));
        }
        if tokens.len() < seq_len {
            return Err(Error::input(format!(
                "corpus has {} training tokens, fewer than seq_len {seq_len}",
                tokens.len()
            )));
        }
        Ok(BatchStream {
            tokens,
            seq_len,
            batch_size,
            seed,
            n_windows: tokens.len() - seq_len + 1,
            next: 0,
            perm: None,
        })
    }

    /// Position the stream so the next batch is batch number `step`.
    pub fn seek(&mut self, step: usize) {
        self.next = step;
    }

    pub fn position(&self) -> usize {
        self.next
    }

    fn offset(&mut self, global: usize) -> usize {
        let epoch = global / self.n_windows;
        let idx = global % self.n_windows;
        let stale = !matches!(&self.perm, Some((e, _)) if *e == epoch);
        if stale {
            let mut perm: Vec<usize> = (0..self.n_windows).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(mix(self.seed, epoch as u64));
            perm.shuffle(&mut rng);
            self.perm = Some((epoch, perm));
        }
        self.perm.as_ref().unwrap().1[idx]
    }

    pub fn batch_at(&mut self, step: usize) -> TokenBatch {
        let sequences = (0..self.batch_size)
            .map(|j| {
                let o = self.offset(step * self.batch_size + j);
                self.tokens[o..o + self.seq_len].to_vec()
            })
            .collect();
        TokenBatch {
            sequences,
            seq_len: self.seq_len,
        }
    }
}

impl Iterator for BatchStream<'_> {
    type Item = TokenBatch;

    fn next(&mut self) -> Option<TokenBatch> {
        let b = self.batch_at(self.next);
        self.next += 1;
        Some(b)
    }
}

/// SplitMix64-style combination of two words into a seed.
pub(crate) fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9E37_79B9_7F4A_7C15).rotate_left(17);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus(n: u32) -> Corpus {
        Corpus::new("t", (0..n).map(|i| i % 500).collect(), 0.0).unwrap()
    }

    #[test]
    fn same_seed_same_batches() {
        let c = corpus(20_000);
        let a: Vec<_> = batch_stream(&c, 32, 4, 9).unwrap().take(5).collect();
        let b: Vec<_> = batch_stream(&c, 32, 4, 9).unwrap().take(5).collect();
        assert_eq!(a, b);
        assert!(a.iter().all(|b| b.batch_size() == 4 && b.seq_len == 32));
    }

    #[test]
    fn different_seeds_differ() {
        let c = corpus(20_000);
        let a = batch_stream(&c, 32, 4, 1).unwrap().next().unwrap();
        let b = batch_stream(&c, 32, 4, 2).unwrap().next().unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn full_length_window_is_the_only_window() {
        let c = corpus(50);
        let mut s = batch_stream(&c, 50, 3, 5).unwrap();
        let first = s.next().unwrap();
        assert!(first.sequences.iter().all(|q| q == c.train()));
        assert_eq!(s.next().unwrap(), first);
        assert!(batch_stream(&c, 51, 1, 0).is_err());
    }

    #[test]
    fn seek_matches_sequential_iteration() {
        let c = corpus(300);
        let seq: Vec<_> = batch_stream(&c, 10, 7, 3).unwrap().take(120).collect();
        let mut s = batch_stream(&c, 10, 7, 3).unwrap();
        s.seek(97);
        assert_eq!(s.next().unwrap(), seq[97]);
        assert_eq!(s.batch_at(3), seq[3]);
    }

    #[test]
    fn epochs_cover_every_window() {
        let c = corpus(40);
        let mut s = batch_stream(&c, 8, 1, 11).unwrap();
        let mut starts: Vec<u32> = (0..33).map(|_| s.next().unwrap().sequences[0][0]).collect();
        starts.sort();
        assert_eq!(starts, (0..33).collect::<Vec<_>>());
    }
}
