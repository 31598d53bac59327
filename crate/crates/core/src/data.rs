//! Corpus ingestion, the train/eval split and next-token batching.
//!
//! Text files are tokenized byte-wise (vocab 256). Pre-tokenized corpora use
//! a small binary container: the magic `CTOK`, a little-endian `u32`
//! version (1), then little-endian `u32` token ids.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const TOKEN_MAGIC: &[u8; 4] = b"CTOK";
pub const TOKEN_VERSION: u32 = 1;
pub const BYTE_VOCAB: usize = 256;
pub const DEFAULT_TRAIN_FRACTION: f64 = 0.99;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    tokens: Vec<u32>,
    digest: String,
    split_point: usize,
    vocab_size: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

/// `targets[b][p]` is the corpus token after `inputs[b][p]`; both are
/// row-major `[batch, seq_len]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub batch: usize,
    pub seq_len: usize,
}

impl Corpus {
    /// Build from raw ids; the digest covers the little-endian id stream.
    pub fn from_tokens(tokens: Vec<u32>, vocab_size: usize, train_fraction: f64) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Ingest("corpus is empty".into()));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= vocab_size) {
            return Err(Error::Ingest(format!(
                "token id {bad} is not below vocab_size {vocab_size}"
            )));
        }
        if !(train_fraction > 0.0 && train_fraction < 1.0) {
            return Err(Error::Config(format!(
                "train fraction must lie in (0, 1), got {train_fraction}"
            )));
        }
        let mut h = Sha256::new();
        for t in &tokens {
            h.update(t.to_le_bytes());
        }
        let split_point = (tokens.len() as f64 * train_fraction).floor() as usize;
        Ok(Self {
            digest: hex::encode(h.finalize()),
            split_point,
            vocab_size,
            tokens,
        })
    }

    /// Byte-level tokenization of arbitrary bytes.
    pub fn from_bytes(bytes: &[u8], train_fraction: f64) -> Result<Self> {
        Self::from_tokens(
            bytes.iter().map(|&b| b as u32).collect(),
            BYTE_VOCAB,
            train_fraction,
        )
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Hex SHA-256 of the token stream.
    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn split_point(&self) -> usize {
        self.split_point
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn segment(&self, split: Split) -> &[u32] {
        match split {
            Split::Train => &self.tokens[..self.split_point],
            Split::Eval => &self.tokens[self.split_point..],
        }
    }

    fn checked_segment(&self, split: Split, seq_len: usize) -> Result<&[u32]> {
        let seg = self.segment(split);
        if seq_len == 0 || seg.len() <= seq_len {
            return Err(Error::Config(format!(
                "{split:?} segment has {} tokens, needs more than seq_len = {seq_len}",
                seg.len()
            )));
        }
        Ok(seg)
    }

    /// Seeded stream of training batches; windows are drawn uniformly with
    /// replacement from the train segment.
    pub fn train_batches(
        &self,
        seq_len: usize,
        batch: usize,
        seed: u64,
    ) -> Result<TrainBatches<'_>> {
        self.checked_segment(Split::Train, seq_len)?;
        Ok(TrainBatches {
            corpus: self,
            seq_len,
            batch,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// Non-overlapping consecutive eval windows, in order. A tail shorter
    /// than a full window is dropped.
    pub fn eval_windows(&self, seq_len: usize) -> Result<EvalWindows> {
        let seg = self.checked_segment(Split::Eval, seq_len)?;
        let n = (seg.len() - 1) / seq_len;
        Ok(EvalWindows {
            start: self.split_point,
            seq_len,
            n_windows: n,
            dropped: seg.len() - 1 - n * seq_len,
        })
    }

    /// `(inputs, targets)` for the window starting at absolute `start`.
    pub fn window(&self, start: usize, seq_len: usize) -> (&[u32], &[u32]) {
        (
            &self.tokens[start..start + seq_len],
            &self.tokens[start + 1..start + seq_len + 1],
        )
    }

    /// Assemble a batch from window start offsets.
    pub fn batch_at(&self, starts: &[usize], seq_len: usize) -> TokenBatch {
        let mut inputs = Vec::with_capacity(starts.len() * seq_len);
        let mut targets = Vec::with_capacity(starts.len() * seq_len);
        for &s in starts {
            let (i, t) = self.window(s, seq_len);
            inputs.extend(i.iter().map(|&v| v as usize));
            targets.extend(t.iter().map(|&v| v as usize));
        }
        TokenBatch {
            inputs,
            targets,
            batch: starts.len(),
            seq_len,
        }
    }
}

/// Read a corpus from `path`: a `CTOK` container if the magic matches,
/// otherwise raw bytes.
pub fn ingest(path: &Path, vocab_size: usize, train_fraction: f64) -> Result<Corpus> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Ingest(format!("cannot read corpus {}: {e}", path.display())))?;
    if bytes.is_empty() {
        return Err(Error::Ingest(format!("corpus {} is empty", path.display())));
    }
    if bytes.starts_with(TOKEN_MAGIC) {
        let tokens = decode_tokens(&bytes)?;
        return Corpus::from_tokens(tokens, vocab_size, train_fraction);
    }
    if vocab_size < BYTE_VOCAB {
        return Err(Error::Config(format!(
            "byte-level text needs vocab_size >= 256, got {vocab_size}"
        )));
    }
    Corpus::from_tokens(
        bytes.iter().map(|&b| b as u32).collect(),
        vocab_size,
        train_fraction,
    )
}

pub fn encode_tokens(tokens: &[u32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * tokens.len());
    out.extend_from_slice(TOKEN_MAGIC);
    out.extend_from_slice(&TOKEN_VERSION.to_le_bytes());
    for t in tokens {
        out.extend_from_slice(&t.to_le_bytes());
    }
    out
}

pub fn decode_tokens(bytes: &[u8]) -> Result<Vec<u32>> {
    if bytes.len() < 8 || &bytes[..4] != TOKEN_MAGIC {
        return Err(Error::Ingest("missing CTOK header".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != TOKEN_VERSION {
        return Err(Error::Version {
            found: version,
            expected: TOKEN_VERSION,
        });
    }
    let body = &bytes[8..];
    if body.len() % 4 != 0 {
        return Err(Error::Ingest(format!(
            "token payload of {} bytes is not a multiple of 4",
            body.len()
        )));
    }
    Ok(body
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// `batch` uniform window starts in the train segment. The window's last
/// target stays inside the segment. Needs `seq_len < split_point`.
pub fn sample_train_starts<R: Rng>(
    corpus: &Corpus,
    seq_len: usize,
    batch: usize,
    rng: &mut R,
) -> Vec<usize> {
    let hi = corpus.split_point - seq_len;
    (0..batch).map(|_| rng.random_range(0..hi)).collect()
}

pub struct TrainBatches<'a> {
    corpus: &'a Corpus,
    seq_len: usize,
    batch: usize,
    rng: ChaCha8Rng,
}

impl TrainBatches<'_> {
    pub fn rng(&self) -> &ChaCha8Rng {
        &self.rng
    }

    pub fn set_rng(&mut self, rng: ChaCha8Rng) {
        self.rng = rng;
    }

    /// Window start offsets of the next batch.
    pub fn next_starts(&mut self) -> Vec<usize> {
        sample_train_starts(self.corpus, self.seq_len, self.batch, &mut self.rng)
    }
}

impl Iterator for TrainBatches<'_> {
    type Item = TokenBatch;

    fn next(&mut self) -> Option<TokenBatch> {
        let starts = self.next_starts();
        Some(self.corpus.batch_at(&starts, self.seq_len))
    }
}

/// Layout of the eval windows over the eval segment.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalWindows {
    start: usize,
    seq_len: usize,
    n_windows: usize,
    dropped: usize,
}

impl EvalWindows {
    pub fn len(&self) -> usize {
        self.n_windows
    }

    pub fn is_empty(&self) -> bool {
        self.n_windows == 0
    }

    /// Tokens at the tail not covered by any window.
    pub fn dropped(&self) -> usize {
        self.dropped
    }

    pub fn starts(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.n_windows).map(|w| self.start + w * self.seq_len)
    }

    /// Consecutive groups of up to `batch` windows.
    pub fn batches<'c>(
        &self,
        corpus: &'c Corpus,
        batch: usize,
    ) -> impl Iterator<Item = TokenBatch> + 'c {
        let starts: Vec<usize> = self.starts().collect();
        let seq_len = self.seq_len;
        let groups: Vec<Vec<usize>> = starts.chunks(batch.max(1)).map(<[usize]>::to_vec).collect();
        groups
            .into_iter()
            .map(move |g| corpus.batch_at(&g, seq_len))
    }
}

/// Entropy (nats) of the token frequency distribution of `tokens`.
pub fn unigram_entropy(tokens: &[u32]) -> f64 {
    let mut counts = std::collections::HashMap::new();
    for &t in tokens {
        *counts.entry(t).or_insert(0usize) += 1;
    }
    let n = tokens.len() as f64;
    -counts
        .values()
        .map(|&c| {
            let p = c as f64 / n;
            p * p.ln()
        })
        .sum::<f64>()
}
