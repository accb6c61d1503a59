//! Byte-level tokenization, corpus splits, training batches and calibration
//! sampling.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Beginning-of-sequence id, one past the byte range.
pub const BOS: u32 = 256;
pub const VOCAB_SIZE: usize = 257;

pub fn tokenize(bytes: &[u8]) -> Vec<u32> {
    bytes.iter().map(|&b| b as u32).collect()
}

/// Inverse of [`tokenize`]; BOS markers are dropped.
pub fn detokenize(tokens: &[u32]) -> Result<Vec<u8>> {
    tokens
        .iter()
        .filter(|&&t| t != BOS)
        .map(|&t| u8::try_from(t).map_err(|_| Error::Index(format!("token {t} is not a byte"))))
        .collect()
}

/// A tokenized corpus with a contiguous train/validation split: the last
/// `val_fraction` of tokens is validation.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub name: String,
    tokens: Vec<u32>,
    split: usize,
}

impl Corpus {
    pub fn from_tokens(name: impl Into<String>, tokens: Vec<u32>, val_fraction: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&val_fraction) {
            return Err(Error::Config(format!("val_fraction must be in [0, 1), got {val_fraction}")));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= VOCAB_SIZE) {
            return Err(Error::Index(format!("token id {bad} >= vocab_size {VOCAB_SIZE}")));
        }
        let val = (tokens.len() as f64 * val_fraction).round() as usize;
        let split = tokens.len() - val;
        Ok(Corpus {
            name: name.into(),
            tokens,
            split,
        })
    }

    pub fn from_bytes(name: impl Into<String>, bytes: &[u8], val_fraction: f64) -> Result<Self> {
        Self::from_tokens(name, tokenize(bytes), val_fraction)
    }

    pub fn from_file(path: impl AsRef<Path>, val_fraction: f64) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path)?;
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        Self::from_bytes(name, &bytes, val_fraction)
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

    pub fn val(&self) -> &[u32] {
        &self.tokens[self.split..]
    }

    /// First validation token offset.
    pub fn split_offset(&self) -> usize {
        self.split
    }
}

/// `S` windows of exactly `L` train tokens used only for scoring.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSet {
    pub seed: u64,
    pub source: String,
    #[serde(rename = "S")]
    pub num_samples: usize,
    #[serde(rename = "L")]
    pub seq_len: usize,
    /// Offsets of each window in the corpus.
    pub starts: Vec<usize>,
    pub sequences: Vec<Vec<u32>>,
}

impl CalibrationSet {
    /// Builds a set from explicit sequences (all must share one length).
    pub fn from_sequences(source: impl Into<String>, sequences: Vec<Vec<u32>>) -> Result<Self> {
        let l = sequences.first().map(Vec::len).unwrap_or(0);
        if sequences.is_empty() || l == 0 || sequences.iter().any(|s| s.len() != l) {
            return Err(Error::Data("calibration sequences must be nonempty and equally long".into()));
        }
        Ok(CalibrationSet {
            seed: 0,
            source: source.into(),
            num_samples: sequences.len(),
            seq_len: l,
            starts: Vec::new(),
            sequences,
        })
    }

    /// Flattened `(inputs, targets, batch)`: each row predicts tokens
    /// `2..=L` from their prefixes.
    pub fn inputs_targets(&self) -> Result<(Vec<u32>, Vec<u32>, usize)> {
        if self.seq_len < 2 {
            return Err(Error::Config("calibration sequences need at least 2 tokens to score".into()));
        }
        let mut inputs = Vec::with_capacity(self.sequences.len() * (self.seq_len - 1));
        let mut targets = Vec::with_capacity(inputs.capacity());
        for s in &self.sequences {
            inputs.extend_from_slice(&s[..s.len() - 1]);
            targets.extend_from_slice(&s[1..]);
        }
        Ok((inputs, targets, self.sequences.len()))
    }

    /// Number of predicted tokens, `S * (L - 1)`.
    pub fn predicted_tokens(&self) -> usize {
        self.sequences.len() * self.seq_len.saturating_sub(1)
    }

    /// All tokens back to back, in sample order.
    pub fn flat_tokens(&self) -> Vec<u32> {
        self.sequences.concat()
    }
}

/// Draws `s` non-overlapping windows of `l` tokens from the train split,
/// uniformly over all such placements.
pub fn sample_calibration(corpus: &Corpus, s: usize, l: usize, seed: u64) -> Result<CalibrationSet> {
    if s == 0 || l == 0 {
        return Err(Error::Config("calibration needs S >= 1 and L >= 1".into()));
    }
    let train = corpus.train();
    let need = s
        .checked_mul(l)
        .ok_or_else(|| Error::Config("S * L overflows".into()))?;
    if train.len() < need {
        return Err(Error::Data(format!(
            "train split has {} tokens, calibration needs {need}",
            train.len()
        )));
    }
    let slack = train.len() - need;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut offsets: Vec<usize> = (0..s).map(|_| rng.gen_range(0..=slack)).collect();
    offsets.sort_unstable();
    let starts: Vec<usize> = offsets.iter().enumerate().map(|(i, o)| o + i * l).collect();
    let sequences = starts.iter().map(|&st| train[st..st + l].to_vec()).collect();
    Ok(CalibrationSet {
        seed,
        source: corpus.name.clone(),
        num_samples: s,
        seq_len: l,
        starts,
        sequences,
    })
}

/// One training batch of `batch` rows, each `seq_len` long, flattened.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Vec<u32>,
    pub targets: Vec<u32>,
    pub batch: usize,
    pub seq_len: usize,
}

/// Endless stream of shuffled batches. Window `i` covers train tokens
/// `[i*seq_len, i*seq_len + seq_len]`; every epoch is a fresh permutation
/// of all windows and a trailing partial batch is dropped.
pub struct BatchIter<'c> {
    train: &'c [u32],
    batch: usize,
    seq_len: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    cursor: usize,
}

pub fn batch_iter(corpus: &Corpus, batch: usize, seq_len: usize, seed: u64) -> Result<BatchIter<'_>> {
    BatchIter::new(corpus.train(), batch, seq_len, seed)
}

impl<'c> BatchIter<'c> {
    pub fn new(train: &'c [u32], batch: usize, seq_len: usize, seed: u64) -> Result<Self> {
        if batch == 0 || seq_len == 0 {
            return Err(Error::Config("batch and seq_len must be >= 1".into()));
        }
        let windows = train.len().saturating_sub(1) / seq_len;
        if windows < batch {
            return Err(Error::Data(format!(
                "{} train tokens give {windows} windows of {seq_len}, fewer than batch {batch}",
                train.len()
            )));
        }
        let mut it = BatchIter {
            train,
            batch,
            seq_len,
            seed,
            epoch: 0,
            order: Vec::new(),
            cursor: 0,
        };
        it.shuffle();
        Ok(it)
    }

    pub fn windows(&self) -> usize {
        self.train.len().saturating_sub(1) / self.seq_len
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.windows() / self.batch
    }

    /// Window start offsets for the current epoch, in visiting order.
    pub fn epoch_order(&self) -> &[usize] {
        &self.order
    }

    fn shuffle(&mut self) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.epoch);
        self.order = (0..self.windows()).collect();
        self.order.shuffle(&mut rng);
        self.cursor = 0;
    }
}

impl Iterator for BatchIter<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.cursor + self.batch > self.order.len() {
            self.epoch += 1;
            self.shuffle();
        }
        let l = self.seq_len;
        let mut inputs = Vec::with_capacity(self.batch * l);
        let mut targets = Vec::with_capacity(self.batch * l);
        for &w in &self.order[self.cursor..self.cursor + self.batch] {
            let s = w * l;
            inputs.extend_from_slice(&self.train[s..s + l]);
            targets.extend_from_slice(&self.train[s + 1..s + l + 1]);
        }
        self.cursor += self.batch;
        Some(Batch {
            inputs,
            targets,
            batch: self.batch,
            seq_len: l,
        })
    }
}
