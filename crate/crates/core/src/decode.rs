//! Greedy and beam-search decoding, corpus BLEU.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::model::{EncodedSource, Model};
use crate::textpipe::{Normalization, Vocabulary, END, START};
use crate::trainkit::argmax;

/// Extra decoding steps allowed beyond the source length.
pub const MAX_EXTRA: usize = 50;
/// Default length-normalisation exponent.
pub const DEFAULT_ALPHA: f64 = 0.6;

/// Supplies next-token log-probabilities for a batch of equal-length
/// prefixes. Every prefix starts with START.
pub trait StepScorer {
    fn next_log_probs(&self, prefixes: &[Vec<u32>]) -> Result<Vec<Vec<f64>>>;
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::INFINITY {
        return row
            .iter()
            .map(|&x| if x == f64::INFINITY { 0.0 } else { f64::NEG_INFINITY })
            .collect();
    }
    let z = row.iter().map(|x| (x - m).exp()).sum::<f64>().ln() + m;
    row.iter().map(|x| x - z).collect()
}

/// Scores prefixes with a model against one cached source sentence.
pub struct ModelScorer<'m> {
    model: &'m Model,
    encoded: EncodedSource,
}

impl<'m> ModelScorer<'m> {
    pub fn new(model: &'m Model, src: &[u32]) -> Result<Self> {
        if src.is_empty() {
            return Err(Error::data("cannot decode an empty source sentence"));
        }
        let encoded = model.encode(&[src.to_vec()])?;
        Ok(ModelScorer { model, encoded })
    }
}

impl StepScorer for ModelScorer<'_> {
    fn next_log_probs(&self, prefixes: &[Vec<u32>]) -> Result<Vec<Vec<f64>>> {
        let logits = self.model.decode_logits(&self.encoded, prefixes)?;
        let (t, v) = (logits.shape()[1], logits.shape()[2]);
        Ok((0..prefixes.len())
            .map(|n| {
                let off = (n * t + t - 1) * v;
                log_softmax(&logits.data()[off..off + v])
            })
            .collect())
    }
}

/// Scorer backed by a closure returning raw logits for a prefix.
pub struct FnScorer<F>(pub F);

impl<F: Fn(&[u32]) -> Vec<f64>> StepScorer for FnScorer<F> {
    fn next_log_probs(&self, prefixes: &[Vec<u32>]) -> Result<Vec<Vec<f64>>> {
        Ok(prefixes.iter().map(|p| log_softmax(&(self.0)(p))).collect())
    }
}

/// A partial or complete output sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Starts with START; ends with END once finished.
    pub tokens: Vec<u32>,
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    fn root() -> Self {
        Hypothesis {
            tokens: vec![START],
            log_prob: 0.0,
            finished: false,
        }
    }

    /// Output tokens without START and END.
    pub fn output(&self) -> Vec<u32> {
        let end = if self.finished { self.tokens.len() - 1 } else { self.tokens.len() };
        self.tokens[1..end].to_vec()
    }

    /// Number of scored tokens, END included.
    pub fn scored_len(&self) -> usize {
        self.tokens.len() - 1
    }

    pub fn normalized(&self, alpha: f64) -> f64 {
        self.log_prob / length_penalty(self.scored_len(), alpha)
    }
}

/// `((5 + T) / 6)^α`.
pub fn length_penalty(len: usize, alpha: f64) -> f64 {
    ((5.0 + len as f64) / 6.0).powf(alpha)
}

/// Repeated argmax until END or `src_len + max_extra` output tokens. Returns
/// the output without START/END.
pub fn greedy_decode<S: StepScorer + ?Sized>(scorer: &S, src_len: usize, max_extra: usize) -> Result<Vec<u32>> {
    let cap = src_len + max_extra;
    let mut prefix = vec![START];
    while prefix.len() - 1 < cap {
        let lp = scorer.next_log_probs(std::slice::from_ref(&prefix))?;
        let next = argmax(&lp[0]) as u32;
        if next == END {
            break;
        }
        prefix.push(next);
    }
    Ok(prefix[1..].to_vec())
}

/// Beam search.
///
/// Each step expands every live hypothesis by every token and keeps the
/// `width` best candidates by raw log-probability (ties: earlier hypothesis,
/// then lower id). Candidates ending in END leave the beam as finished.
/// The result is the finished hypothesis with the best normalised score;
/// unfinished hypotheses at the cap compete only if nothing finished.
pub fn beam_search<S: StepScorer + ?Sized>(
    scorer: &S,
    src_len: usize,
    width: usize,
    alpha: f64,
    max_extra: usize,
) -> Result<Hypothesis> {
    if width < 1 {
        return Err(Error::config("beam width must be at least 1"));
    }
    let cap = src_len + max_extra;
    let mut live = vec![Hypothesis::root()];
    let mut finished: Vec<Hypothesis> = Vec::new();
    // Output tokens per hypothesis never exceed `cap`; END may follow.
    for step in 0..=cap {
        if live.is_empty() {
            break;
        }
        let prefixes: Vec<Vec<u32>> = live.iter().map(|h| h.tokens.clone()).collect();
        let scores = scorer.next_log_probs(&prefixes)?;
        let mut cand: Vec<(f64, usize, f64, u32)> = Vec::new();
        for (hi, row) in scores.iter().enumerate() {
            for (tok, &lp) in row.iter().enumerate() {
                // At the cap only END may be appended.
                if step == cap && tok as u32 != END {
                    continue;
                }
                if lp == f64::NEG_INFINITY {
                    continue;
                }
                cand.push((live[hi].log_prob + lp, hi, lp, tok as u32));
            }
        }
        cand.sort_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then(a.1.cmp(&b.1))
                .then(b.2.total_cmp(&a.2))
                .then(a.3.cmp(&b.3))
        });
        let mut next = Vec::with_capacity(width);
        for &(lp, hi, _, tok) in cand.iter().take(width) {
            let mut tokens = live[hi].tokens.clone();
            tokens.push(tok);
            let h = Hypothesis {
                tokens,
                log_prob: lp,
                finished: tok == END,
            };
            if h.finished {
                finished.push(h);
            } else {
                next.push(h);
            }
        }
        if step == cap {
            // Unfinished survivors at the cap stay in `live`.
            break;
        }
        live = next;
    }
    let pool = if finished.is_empty() { &live } else { &finished };
    pool.iter()
        .enumerate()
        .max_by(|(ia, a), (ib, b)| {
            a.normalized(alpha)
                .total_cmp(&b.normalized(alpha))
                .then(ib.cmp(ia))
        })
        .map(|(_, h)| h.clone())
        .ok_or_else(|| Error::Contract("beam search produced no hypothesis".into()))
}

/// [`beam_search`] returning the output tokens.
pub fn beam_decode<S: StepScorer + ?Sized>(
    scorer: &S,
    src_len: usize,
    width: usize,
    alpha: f64,
    max_extra: usize,
) -> Result<Vec<u32>> {
    Ok(beam_search(scorer, src_len, width, alpha, max_extra)?.output())
}

/// Corpus-level BLEU-4 summary.
#[derive(Debug, Clone, PartialEq)]
pub struct BleuReport {
    /// In `[0, 100]`.
    pub bleu: f64,
    pub precisions: [f64; 4],
    pub matches: [usize; 4],
    pub totals: [usize; 4],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn ngram_counts<'a>(tokens: &'a [&'a str], n: usize) -> HashMap<&'a [&'a str], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Unsmoothed corpus BLEU-4 over whitespace tokens, case-sensitive, one
/// reference per hypothesis.
pub fn corpus_bleu<H: AsRef<str>, R: AsRef<str>>(hypotheses: &[H], references: &[R]) -> Result<BleuReport> {
    if hypotheses.is_empty() {
        return Err(Error::data("no hypotheses to score"));
    }
    if hypotheses.len() != references.len() {
        return Err(Error::data(format!(
            "{} hypotheses but {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut hyp_len, mut ref_len) = (0, 0);
    for (h, r) in hypotheses.iter().zip(references) {
        let ht: Vec<&str> = h.as_ref().split_whitespace().collect();
        let rt: Vec<&str> = r.as_ref().split_whitespace().collect();
        hyp_len += ht.len();
        ref_len += rt.len();
        for n in 1..=4 {
            let hc = ngram_counts(&ht, n);
            let rc = ngram_counts(&rt, n);
            for (g, c) in &hc {
                matches[n - 1] += (*c).min(rc.get(g).copied().unwrap_or(0));
            }
            totals[n - 1] += ht.len().saturating_sub(n - 1);
        }
    }
    let mut precisions = [0.0; 4];
    for n in 0..4 {
        if totals[n] > 0 {
            precisions[n] = matches[n] as f64 / totals[n] as f64;
        }
    }
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp().min(1.0)
    };
    let bleu = if precisions.iter().any(|&p| p == 0.0) {
        0.0
    } else {
        100.0 * brevity_penalty * (precisions.iter().map(|p| p.ln()).sum::<f64>() / 4.0).exp()
    };
    Ok(BleuReport {
        bleu,
        precisions,
        matches,
        totals,
        brevity_penalty,
        hyp_len,
        ref_len,
    })
}

/// How to search for a translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeOptions {
    /// 1 selects greedy decoding.
    pub beam_width: usize,
    pub alpha: f64,
    pub max_extra: usize,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        DecodeOptions {
            beam_width: 1,
            alpha: DEFAULT_ALPHA,
            max_extra: MAX_EXTRA,
        }
    }
}

/// A model with its vocabularies: text in, text out.
pub struct Translator {
    pub model: Model,
    pub src_vocab: Vocabulary,
    pub tgt_vocab: Vocabulary,
    pub normalization: Normalization,
}

impl Translator {
    pub fn new(model: Model, src_vocab: Vocabulary, tgt_vocab: Vocabulary) -> Result<Self> {
        if src_vocab.len() != model.config.src_vocab || tgt_vocab.len() != model.config.tgt_vocab {
            return Err(Error::config(format!(
                "vocabulary sizes {}/{} do not match the model's {}/{}",
                src_vocab.len(),
                tgt_vocab.len(),
                model.config.src_vocab,
                model.config.tgt_vocab
            )));
        }
        Ok(Translator {
            model,
            src_vocab,
            tgt_vocab,
            normalization: Normalization::default(),
        })
    }

    pub fn translate_ids(&self, src: &[u32], opts: DecodeOptions) -> Result<Vec<u32>> {
        let scorer = ModelScorer::new(&self.model, src)?;
        if opts.beam_width == 1 {
            greedy_decode(&scorer, src.len(), opts.max_extra)
        } else {
            beam_decode(&scorer, src.len(), opts.beam_width, opts.alpha, opts.max_extra)
        }
    }

    /// Translates one line. Empty input yields empty output.
    pub fn translate(&self, line: &str, opts: DecodeOptions) -> Result<String> {
        let src = self.src_vocab.encode(&self.normalization.apply(line));
        if src.is_empty() {
            return Ok(String::new());
        }
        let out = self.translate_ids(&src, opts)?;
        Ok(self.tgt_vocab.decode(&out).trim().to_string())
    }
}
