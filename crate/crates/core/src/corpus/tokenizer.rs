//! Byte-level tokenizer with a frequency-driven merge table.
//!
//! Ids `0..256` are raw bytes, `256` and `257` are the begin/end markers, and
//! every id after that is a merge of two earlier tokens. Merges never absorb a
//! right-hand token containing ASCII whitespace, so learned tokens look like
//! `" word"` rather than `"d w"`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
pub const MIN_VOCAB: usize = 258;

const HEADER: &str = "attnlens-tokenizer 1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Entry {
    Byte(u8),
    Special,
    Merge(u32, u32),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    entries: Vec<Entry>,
    bytes: Vec<Vec<u8>>,
}

impl Tokenizer {
    /// Pure byte vocabulary plus the two markers.
    pub fn bytes_only() -> Self {
        let mut entries: Vec<Entry> = (0..=255u8).map(Entry::Byte).collect();
        entries.push(Entry::Special);
        entries.push(Entry::Special);
        let mut bytes: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        bytes.push(Vec::new());
        bytes.push(Vec::new());
        Tokenizer { entries, bytes }
    }

    pub fn build<S: AsRef<str>>(texts: &[S], target_vocab_size: usize) -> Result<Self> {
        if target_vocab_size < MIN_VOCAB {
            return Err(Error::input(format!(
                "target vocabulary {target_vocab_size} is below the minimum {MIN_VOCAB}"
            )));
        }
        let mut tok = Self::bytes_only();
        let mut seqs: Vec<Vec<u32>> = texts
            .iter()
            .map(|t| t.as_ref().bytes().map(u32::from).collect())
            .collect();

        while tok.vocab_size() < target_vocab_size {
            let mut counts: HashMap<(u32, u32), usize> = HashMap::new();
            for seq in &seqs {
                for pair in seq.windows(2) {
                    if tok.mergeable(pair[1]) {
                        *counts.entry((pair[0], pair[1])).or_default() += 1;
                    }
                }
            }
            // highest count, ties to the smallest pair
            let Some((&pair, &count)) = counts
                .iter()
                .max_by(|a, b| a.1.cmp(b.1).then_with(|| b.0.cmp(a.0)))
            else {
                break;
            };
            if count < 2 {
                break;
            }
            let id = tok.push_merge(pair);
            for seq in &mut seqs {
                apply_merge(seq, pair, id);
            }
        }
        Ok(tok)
    }

    fn mergeable(&self, right: u32) -> bool {
        let b = &self.bytes[right as usize];
        !b.is_empty() && !b.iter().any(u8::is_ascii_whitespace)
    }

    fn push_merge(&mut self, (a, b): (u32, u32)) -> u32 {
        let id = self.entries.len() as u32;
        let mut bytes = self.bytes[a as usize].clone();
        bytes.extend_from_slice(&self.bytes[b as usize]);
        self.entries.push(Entry::Merge(a, b));
        self.bytes.push(bytes);
        id
    }

    pub fn vocab_size(&self) -> usize {
        self.entries.len()
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        self.encode_bytes(text.as_bytes())
    }

    pub fn encode_bytes(&self, data: &[u8]) -> Vec<u32> {
        let mut seq: Vec<u32> = data.iter().map(|&b| u32::from(b)).collect();
        for (id, entry) in self.entries.iter().enumerate().skip(MIN_VOCAB) {
            if seq.len() < 2 {
                break;
            }
            if let Entry::Merge(a, b) = *entry {
                apply_merge(&mut seq, (a, b), id as u32);
            }
        }
        seq
    }

    /// Concatenated bytes of `ids`; markers contribute nothing.
    pub fn decode_bytes(&self, ids: &[u32]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &id in ids {
            let b = self
                .bytes
                .get(id as usize)
                .ok_or_else(|| Error::index("token", id as usize, self.vocab_size()))?;
            out.extend_from_slice(b);
        }
        Ok(out)
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        Ok(String::from_utf8_lossy(&self.decode_bytes(ids)?).into_owned())
    }

    /// Display form of a single token; partial UTF-8 sequences are rendered lossily.
    pub fn token_str(&self, id: u32) -> String {
        match self.entries.get(id as usize) {
            Some(Entry::Special) if id == BOS => "<|bos|>".into(),
            Some(Entry::Special) => "<|eos|>".into(),
            Some(_) => String::from_utf8_lossy(&self.bytes[id as usize]).into_owned(),
            None => format!("<|{id}|>"),
        }
    }

    /// The id of `text` if it encodes to exactly one token.
    pub fn single_token(&self, text: &str) -> Option<u32> {
        match self.encode(text).as_slice() {
            [id] => Some(*id),
            _ => None,
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{HEADER}\nvocab_size {}\n", self.vocab_size());
        for (id, entry) in self.entries.iter().enumerate() {
            let line = match entry {
                Entry::Byte(b) => format!("{id} byte {b:02x}"),
                Entry::Special => format!("{id} special {}", self.token_str(id as u32)),
                Entry::Merge(a, b) => format!("{id} merge {a} {b}"),
            };
            out.push_str(&line);
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |msg: String| Error::input(format!("tokenizer file: {msg}"));
        let mut lines = text.lines();
        if lines.next() != Some(HEADER) {
            return Err(bad("missing header".into()));
        }
        let size: usize = lines
            .next()
            .and_then(|l| l.strip_prefix("vocab_size "))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad("missing vocab_size".into()))?;
        let mut tok = Self::bytes_only();
        for (i, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split(' ').collect();
            let id: usize = fields
                .first()
                .and_then(|f| f.parse().ok())
                .ok_or_else(|| bad(format!("line {}: bad id", i + 3)))?;
            if id != i {
                return Err(bad(format!("ids out of order at {id}")));
            }
            match fields.get(1).copied() {
                Some("byte") | Some("special") if id < MIN_VOCAB => {}
                Some("merge") if id >= MIN_VOCAB && fields.len() == 4 => {
                    let a: u32 = fields[2].parse().map_err(|_| bad(format!("merge {id}")))?;
                    let b: u32 = fields[3].parse().map_err(|_| bad(format!("merge {id}")))?;
                    if a as usize >= id || b as usize >= id {
                        return Err(bad(format!("merge {id} references a later token")));
                    }
                    tok.push_merge((a, b));
                }
                _ => return Err(bad(format!("unexpected record {line:?}"))),
            }
        }
        if tok.vocab_size() != size {
            return Err(bad(format!(
                "declared {size} tokens, found {}",
                tok.vocab_size()
            )));
        }
        Ok(tok)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => e.into(),
        })?;
        Self::from_text(&text)
    }
}

fn apply_merge(seq: &mut Vec<u32>, (a, b): (u32, u32), id: u32) {
    let mut write = 0;
    let mut read = 0;
    while read < seq.len() {
        if read + 1 < seq.len() && seq[read] == a && seq[read + 1] == b {
            seq[write] = id;
            read += 2;
        } else {
            seq[write] = seq[read];
            read += 1;
        }
        write += 1;
    }
    seq.truncate(write);
}
