//! Subword vocabularies, parallel corpora and padded batches.

mod vocab;

pub use vocab::{Vocabulary, END, NUM_SPECIALS, PAD, START, UNK};

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};
use crate::rng::SeedStream;

/// Text normalisation applied before tokenisation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Normalization {
    pub nfc: bool,
    pub lowercase: bool,
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization {
            nfc: true,
            lowercase: false,
        }
    }
}

impl Normalization {
    pub fn apply(&self, text: &str) -> String {
        let s: String = if self.nfc { text.nfc().collect() } else { text.to_string() };
        if self.lowercase {
            s.to_lowercase()
        } else {
            s
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::data(format!("unknown split {other:?}"))),
        }
    }
}

/// Which side of a parallel corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Source,
    Target,
}

impl FromStr for Side {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "src" | "source" => Ok(Side::Source),
            "tgt" | "target" => Ok(Side::Target),
            other => Err(Error::data(format!("unknown corpus side {other:?}"))),
        }
    }
}

/// Sentence pairs of one split.
#[derive(Debug, Clone, PartialEq)]
pub struct ParallelCorpus {
    pub split: Split,
    pub pairs: Vec<(String, String)>,
    /// Lines dropped because one side was empty after normalisation.
    pub skipped: usize,
}

impl ParallelCorpus {
    pub fn new(split: Split, pairs: Vec<(String, String)>) -> Result<Self> {
        if let Some(i) = pairs.iter().position(|(s, t)| s.trim().is_empty() || t.trim().is_empty()) {
            return Err(Error::data(format!("pair {i} has an empty side")));
        }
        Ok(ParallelCorpus {
            split,
            pairs,
            skipped: 0,
        })
    }

    /// Parses tab-separated pairs; `#` lines and blank lines are ignored.
    pub fn parse(text: &str, split: Split, norm: Normalization) -> Result<Self> {
        let mut pairs = Vec::new();
        let mut skipped = 0;
        for (lineno, line) in text.lines().enumerate() {
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            let (src, tgt) = line.split_once('\t').ok_or_else(|| {
                Error::data(format!("line {}: expected `source<TAB>target`", lineno + 1))
            })?;
            if tgt.contains('\t') {
                return Err(Error::data(format!("line {}: more than one tab", lineno + 1)));
            }
            let (src, tgt) = (norm.apply(src), norm.apply(tgt));
            if src.trim().is_empty() || tgt.trim().is_empty() {
                skipped += 1;
                continue;
            }
            pairs.push((src, tgt));
        }
        Ok(ParallelCorpus {
            split,
            pairs,
            skipped,
        })
    }

    pub fn load(path: &Path, split: Split, norm: Normalization) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::data(format!("cannot read corpus {}: {e}", path.display())))?;
        Self::parse(&text, split, norm)
    }

    pub fn side(&self, side: Side) -> Vec<&str> {
        self.pairs
            .iter()
            .map(|(s, t)| match side {
                Side::Source => s.as_str(),
                Side::Target => t.as_str(),
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// A padded training batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `[B, S]` source ids, PAD-filled.
    pub src: Vec<Vec<u32>>,
    /// `[B, T]` START followed by the target tokens.
    pub tgt_in: Vec<Vec<u32>>,
    /// `[B, T]` target tokens followed by END.
    pub tgt_out: Vec<Vec<u32>>,
    /// `[B, T]` 1 on real target positions, 0 on PAD.
    pub loss_mask: Vec<Vec<f64>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    /// Number of unmasked target positions.
    pub fn tokens(&self) -> usize {
        self.loss_mask.iter().flatten().filter(|&&m| m != 0.0).count()
    }
}

/// Batches plus the number of pairs dropped for exceeding `max_len`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batches {
    pub batches: Vec<Batch>,
    pub dropped: usize,
}

fn pad_to(rows: &[&[u32]], prefix: Option<u32>, suffix: Option<u32>) -> Vec<Vec<u32>> {
    let extra = prefix.is_some() as usize + suffix.is_some() as usize;
    let width = rows.iter().map(|r| r.len() + extra).max().unwrap_or(0);
    rows.iter()
        .map(|r| {
            let mut v = Vec::with_capacity(width);
            v.extend(prefix);
            v.extend_from_slice(r);
            v.extend(suffix);
            v.resize(width, PAD);
            v
        })
        .collect()
}

/// Assembles padded batches from already encoded pairs.
///
/// Pairs whose source exceeds `max_len` tokens, or whose target plus the
/// START/END marker does, are dropped rather than truncated. With a shuffle
/// seed the pair order is permuted first.
pub fn make_batches_from_ids(
    pairs: &[(Vec<u32>, Vec<u32>)],
    batch_size: usize,
    max_len: usize,
    shuffle_seed: Option<u64>,
) -> Result<Batches> {
    if batch_size == 0 {
        return Err(Error::config("batch size must be positive"));
    }
    if pairs.is_empty() {
        return Err(Error::data("no sentence pairs to batch"));
    }
    let mut keep: Vec<usize> = (0..pairs.len())
        .filter(|&i| {
            let (s, t) = &pairs[i];
            !s.is_empty() && !t.is_empty() && s.len() <= max_len && t.len() + 1 <= max_len
        })
        .collect();
    let dropped = pairs.len() - keep.len();
    if keep.is_empty() {
        return Err(Error::data(format!(
            "all {} pairs exceed the maximum length {max_len}",
            pairs.len()
        )));
    }
    if let Some(seed) = shuffle_seed {
        SeedStream::new(seed).shuffle(&mut keep);
    }
    let batches = keep
        .chunks(batch_size)
        .map(|idx| {
            let srcs: Vec<&[u32]> = idx.iter().map(|&i| pairs[i].0.as_slice()).collect();
            let tgts: Vec<&[u32]> = idx.iter().map(|&i| pairs[i].1.as_slice()).collect();
            let tgt_out = pad_to(&tgts, None, Some(END));
            let loss_mask = tgt_out
                .iter()
                .map(|r| r.iter().map(|&id| if id == PAD { 0.0 } else { 1.0 }).collect())
                .collect();
            Batch {
                src: pad_to(&srcs, None, None),
                tgt_in: pad_to(&tgts, Some(START), None),
                tgt_out,
                loss_mask,
            }
        })
        .collect();
    Ok(Batches { batches, dropped })
}

/// Encodes both sides of a corpus.
pub fn encode_corpus(
    corpus: &ParallelCorpus,
    vocab_src: &Vocabulary,
    vocab_tgt: &Vocabulary,
) -> Vec<(Vec<u32>, Vec<u32>)> {
    corpus
        .pairs
        .iter()
        .map(|(s, t)| (vocab_src.encode(s), vocab_tgt.encode(t)))
        .collect()
}

pub fn make_batches(
    corpus: &ParallelCorpus,
    vocab_src: &Vocabulary,
    vocab_tgt: &Vocabulary,
    batch_size: usize,
    max_len: usize,
    shuffle_seed: Option<u64>,
) -> Result<Batches> {
    let ids = encode_corpus(corpus, vocab_src, vocab_tgt);
    make_batches_from_ids(&ids, batch_size, max_len, shuffle_seed)
}
