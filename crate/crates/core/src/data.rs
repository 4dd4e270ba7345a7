//! Corpora, tokenization, windowing and batches.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

pub const PAD: u32 = 256;
pub const BOS: u32 = 257;
pub const EOS: u32 = 258;
/// Reserved marker for explicit time conditioning; unused by default.
pub const TIME_MARKER: u32 = 259;
pub const BYTE_VOCAB_SIZE: usize = 260;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VocabKind {
    Byte,
    LearnedSubword,
}

/// Byte vocabulary with optional learned pair merges. Ids `0..256` are raw
/// bytes, `256..260` the specials, merged tokens follow from 260.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    kind: VocabKind,
    merges: Vec<(u32, u32)>,
    #[serde(skip)]
    pieces: Vec<Vec<u8>>,
}

impl Vocabulary {
    pub fn byte() -> Self {
        Self::from_merges(Vec::new())
    }

    fn from_merges(merges: Vec<(u32, u32)>) -> Self {
        let kind = if merges.is_empty() { VocabKind::Byte } else { VocabKind::LearnedSubword };
        let mut v = Self { kind, merges, pieces: Vec::new() };
        v.rebuild();
        v
    }

    fn rebuild(&mut self) {
        let mut pieces: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        pieces.extend(std::iter::repeat_n(Vec::new(), 4));
        for &(a, b) in &self.merges {
            let mut p = pieces[a as usize].clone();
            p.extend_from_slice(&pieces[b as usize]);
            pieces.push(p);
        }
        self.pieces = pieces;
    }

    /// Restores derived tables after deserialization.
    pub fn validated(mut self) -> Result<Self> {
        for (i, &(a, b)) in self.merges.iter().enumerate() {
            let limit = (BYTE_VOCAB_SIZE + i) as u32;
            if a >= limit || b >= limit || (PAD..=TIME_MARKER).contains(&a) || (PAD..=TIME_MARKER).contains(&b) {
                return Err(DataError::Config(format!("merge {i} refers to invalid ids ({a}, {b})")));
            }
        }
        let expect = if self.merges.is_empty() { VocabKind::Byte } else { VocabKind::LearnedSubword };
        if self.kind != expect {
            return Err(DataError::Config("vocabulary kind does not match its merge table".into()));
        }
        self.rebuild();
        Ok(self)
    }

    /// Learns up to `num_merges` pair merges by greedy frequency counting.
    /// Ties go to the smallest pair.
    pub fn train_bpe(corpus: &[u8], num_merges: usize) -> Self {
        let mut seq: Vec<u32> = corpus.iter().map(|&b| b as u32).collect();
        let mut merges = Vec::with_capacity(num_merges);
        for m in 0..num_merges {
            let mut counts: HashMap<(u32, u32), usize> = HashMap::new();
            for w in seq.windows(2) {
                *counts.entry((w[0], w[1])).or_default() += 1;
            }
            let Some((&pair, &count)) = counts.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))) else {
                break;
            };
            if count < 2 {
                break;
            }
            let id = (BYTE_VOCAB_SIZE + m) as u32;
            seq = apply_merge(&seq, pair, id);
            merges.push(pair);
        }
        Self::from_merges(merges)
    }

    pub fn kind(&self) -> VocabKind {
        self.kind
    }

    pub fn size(&self) -> usize {
        BYTE_VOCAB_SIZE + self.merges.len()
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    pub fn is_special(&self, id: u32) -> bool {
        (PAD..=TIME_MARKER).contains(&id)
    }

    pub fn encode(&self, bytes: &[u8]) -> Vec<u32> {
        let mut seq: Vec<u32> = bytes.iter().map(|&b| b as u32).collect();
        for (i, &pair) in self.merges.iter().enumerate() {
            if seq.len() < 2 {
                break;
            }
            seq = apply_merge(&seq, pair, (BYTE_VOCAB_SIZE + i) as u32);
        }
        seq
    }

    /// Special ids decode to nothing.
    pub fn decode(&self, ids: &[u32]) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(ids.len());
        for &id in ids {
            let piece = self
                .pieces
                .get(id as usize)
                .ok_or_else(|| DataError::Domain(format!("id {id} outside vocabulary of {}", self.size())))?;
            out.extend_from_slice(piece);
        }
        Ok(out)
    }
}

fn apply_merge(seq: &[u32], pair: (u32, u32), id: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(seq.len());
    let mut i = 0;
    while i < seq.len() {
        if i + 1 < seq.len() && (seq[i], seq[i + 1]) == pair {
            out.push(id);
            i += 2;
        } else {
            out.push(seq[i]);
            i += 1;
        }
    }
    out
}

/// One training window and where it came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub tokens: Vec<u32>,
    pub source: usize,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Corpus {
    pub windows: Vec<Window>,
}

impl Corpus {
    pub fn from_sequences(seqs: Vec<Vec<u32>>) -> Self {
        let windows = seqs
            .into_iter()
            .enumerate()
            .map(|(i, tokens)| Window { tokens, source: i, offset: 0 })
            .collect();
        Self { windows }
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn token_count(&self) -> usize {
        self.windows.iter().map(|w| w.tokens.len()).sum()
    }

    /// Batch of the windows at `indices`, right-padded with `PAD`.
    pub fn batch(&self, indices: &[usize]) -> Batch {
        let width = indices.iter().map(|&i| self.windows[i].tokens.len()).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(indices.len());
        let mut lengths = Vec::with_capacity(indices.len());
        let mut offsets = Vec::with_capacity(indices.len());
        for &i in indices {
            let w = &self.windows[i];
            let mut row = w.tokens.clone();
            row.resize(width, PAD);
            ids.push(row);
            lengths.push(w.tokens.len());
            offsets.push((w.source, w.offset));
        }
        Batch { ids, lengths, offsets }
    }

    /// Batch of `size` windows drawn uniformly with replacement.
    pub fn sample_batch<R: Rng>(&self, size: usize, rng: &mut R) -> Batch {
        let idx: Vec<usize> = (0..size).map(|_| rng.random_range(0..self.windows.len())).collect();
        self.batch(&idx)
    }
}

/// `B x L` token ids (right-padded), valid lengths, and `(source, offset)`
/// provenance per row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Batch {
    pub ids: Vec<Vec<u32>>,
    pub lengths: Vec<usize>,
    pub offsets: Vec<(usize, usize)>,
}

impl Batch {
    pub fn batch_size(&self) -> usize {
        self.ids.len()
    }

    pub fn width(&self) -> usize {
        self.ids.first().map_or(0, Vec::len)
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        let width = self.width();
        for (row, &len) in self.ids.iter().zip(&self.lengths) {
            if row.len() != width || len > width {
                return Err(DataError::Domain("ragged batch".into()));
            }
            if let Some(id) = row.iter().find(|&&id| id as usize >= vocab_size) {
                return Err(DataError::Domain(format!("id {id} outside vocabulary of {vocab_size}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestConfig {
    pub train_fraction: f64,
    pub window: usize,
    /// Window stride; `None` partitions each document.
    pub stride: Option<usize>,
    pub seed: u64,
}

impl IngestConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.train_fraction) {
            return Err(DataError::Config(format!("train fraction {} outside [0, 1]", self.train_fraction)));
        }
        if self.window == 0 {
            return Err(DataError::Config("window length must be positive".into()));
        }
        if self.stride == Some(0) {
            return Err(DataError::Config("stride must be positive".into()));
        }
        Ok(())
    }
}

/// Cuts a token stream into windows. Without a stride the windows partition
/// the stream and the last one may be short.
pub fn windows(tokens: &[u32], window: usize, stride: Option<usize>, source: usize) -> Vec<Window> {
    let step = stride.unwrap_or(window);
    let mut out = Vec::new();
    let mut start = 0;
    while start < tokens.len() {
        let end = (start + window).min(tokens.len());
        out.push(Window { tokens: tokens[start..end].to_vec(), source, offset: start });
        if end == tokens.len() {
            break;
        }
        start += step;
    }
    out
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| DataError::Io { path: path.to_path_buf(), source })
}

/// Reads, tokenizes and windows every file, then splits the windows into
/// train and validation sets by a seeded shuffle.
pub fn ingest(paths: &[PathBuf], vocab: &Vocabulary, config: &IngestConfig) -> Result<(Corpus, Corpus)> {
    config.validate()?;
    let mut all = Vec::new();
    for (i, p) in paths.iter().enumerate() {
        let bytes = read_file(p)?;
        all.extend(windows(&vocab.encode(&bytes), config.window, config.stride, i));
    }
    Ok(split(all, config.train_fraction, config.seed))
}

pub fn split(mut all: Vec<Window>, train_fraction: f64, seed: u64) -> (Corpus, Corpus) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    all.shuffle(&mut rng);
    let n_train = (all.len() as f64 * train_fraction).round() as usize;
    let val = all.split_off(n_train.min(all.len()));
    (Corpus { windows: all }, Corpus { windows: val })
}

/// `count` sequences of `len` uniformly random byte ids.
pub fn memorization_corpus(count: usize, len: usize, seed: u64) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Corpus::from_sequences((0..count).map(|_| (0..len).map(|_| rng.random_range(0..256u32)).collect()).collect())
}

/// Lines of the form `a+b=c` with operands below `max_operand`.
pub fn arithmetic_corpus(lines: usize, max_operand: u32, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::new();
    for _ in 0..lines {
        let a = rng.random_range(0..max_operand);
        let b = rng.random_range(0..max_operand);
        out.push_str(&format!("{a}+{b}={}\n", a + b));
    }
    out
}

/// Bundled public-domain text (eight plays, about 1.1 MB).
pub fn bundled_text_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data").join("shakespeare_tragedies.txt")
}

/// Empirical byte-unigram entropy in bits.
pub fn unigram_entropy_bits(bytes: &[u8]) -> f64 {
    let mut counts = [0usize; 256];
    for &b in bytes {
        counts[b as usize] += 1;
    }
    let n = bytes.len() as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum()
}
