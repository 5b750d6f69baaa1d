use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const START: u32 = 1;
pub const END: u32 = 2;
pub const UNK: u32 = 3;
pub const NUM_SPECIALS: usize = 4;

const SPECIAL_NAMES: [&str; NUM_SPECIALS] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Byte-level BPE vocabulary.
///
/// Ids `0..4` are the specials; every later id is a byte string. Ids are
/// assigned in creation order (single bytes first, then merges), and encoding
/// repeatedly merges the adjacent pair whose concatenation has the lowest id,
/// so the token list alone fully determines the tokenizer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<Vec<u8>>,
    index: HashMap<Vec<u8>, u32>,
}

/// Splits text into chunks of leading whitespace plus a non-whitespace run.
/// Merges never cross chunk boundaries.
pub(crate) fn chunks(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut in_word = false;
    for (i, c) in text.char_indices() {
        let ws = c.is_whitespace();
        if ws && in_word {
            out.push(&text[start..i]);
            start = i;
        }
        in_word = !ws;
    }
    if start < text.len() {
        out.push(&text[start..]);
    }
    out
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<Vec<u8>>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() {
                return Err(Error::data(format!("empty token at id {}", i + NUM_SPECIALS)));
            }
            if index.insert(t.clone(), (i + NUM_SPECIALS) as u32).is_some() {
                return Err(Error::data(format!("duplicate token at id {}", i + NUM_SPECIALS)));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    /// Learns merges over `lines` until the vocabulary holds `cap` entries or
    /// no pair occurs at least `min_freq` times.
    pub fn train<S: AsRef<str>>(lines: &[S], cap: usize, min_freq: usize) -> Result<Self> {
        if cap <= NUM_SPECIALS {
            return Err(Error::config(format!(
                "vocabulary cap {cap} leaves no room beyond the {NUM_SPECIALS} specials"
            )));
        }
        if lines.is_empty() {
            return Err(Error::data("cannot build a vocabulary from an empty corpus"));
        }
        let mut word_counts: BTreeMap<&[u8], usize> = BTreeMap::new();
        let mut byte_counts = [0usize; 256];
        for line in lines {
            for chunk in chunks(line.as_ref()) {
                *word_counts.entry(chunk.as_bytes()).or_default() += 1;
                for &b in chunk.as_bytes() {
                    byte_counts[b as usize] += 1;
                }
            }
        }
        // Keep the most frequent bytes if they do not all fit.
        let mut alphabet: Vec<u8> = (0..=255u8).filter(|&b| byte_counts[b as usize] > 0).collect();
        alphabet.sort_by(|a, b| byte_counts[*b as usize].cmp(&byte_counts[*a as usize]).then(a.cmp(b)));
        alphabet.truncate(cap - NUM_SPECIALS);
        alphabet.sort_unstable();

        let mut vocab = Vocabulary::from_tokens(alphabet.iter().map(|&b| vec![b]).collect())?;
        let mut words: Vec<(Vec<u32>, usize)> = word_counts
            .into_iter()
            .map(|(w, c)| (w.iter().map(|b| vocab.id_of(&[*b])).collect(), c))
            .collect();

        while vocab.len() < cap {
            let mut pairs: HashMap<(u32, u32), usize> = HashMap::new();
            for (syms, count) in &words {
                for w in syms.windows(2) {
                    if w[0] != UNK && w[1] != UNK {
                        *pairs.entry((w[0], w[1])).or_default() += count;
                    }
                }
            }
            let best = pairs.into_iter().max_by(|(pa, ca), (pb, cb)| {
                ca.cmp(cb).then_with(|| {
                    // Deterministic tie-break: lexicographically smallest merge wins.
                    vocab.concat(*pb).cmp(&vocab.concat(*pa)).then(pb.cmp(pa))
                })
            });
            let Some((pair, count)) = best else { break };
            if count < min_freq.max(1) {
                break;
            }
            let merged = vocab.concat(pair);
            let id = match vocab.index.get(&merged) {
                Some(&id) => id,
                None => {
                    let id = vocab.len() as u32;
                    vocab.index.insert(merged.clone(), id);
                    vocab.tokens.push(merged);
                    id
                }
            };
            for (syms, _) in &mut words {
                *syms = merge_pair(syms, pair, id);
            }
        }
        Ok(vocab)
    }

    fn id_of(&self, bytes: &[u8]) -> u32 {
        self.index.get(bytes).copied().unwrap_or(UNK)
    }

    fn concat(&self, (a, b): (u32, u32)) -> Vec<u8> {
        let mut v = self.bytes(a).to_vec();
        v.extend_from_slice(self.bytes(b));
        v
    }

    /// Bytes of a regular token; empty for specials and unknown ids.
    pub fn bytes(&self, id: u32) -> &[u8] {
        (id as usize)
            .checked_sub(NUM_SPECIALS)
            .and_then(|i| self.tokens.get(i))
            .map_or(&[], Vec::as_slice)
    }

    /// Number of ids including the specials.
    pub fn len(&self) -> usize {
        self.tokens.len() + NUM_SPECIALS
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for chunk in chunks(text) {
            let mut syms: Vec<u32> = chunk.bytes().map(|b| self.id_of(&[b])).collect();
            loop {
                let mut best: Option<(usize, u32)> = None;
                for i in 0..syms.len().saturating_sub(1) {
                    if syms[i] == UNK || syms[i + 1] == UNK {
                        continue;
                    }
                    if let Some(&id) = self.index.get(&self.concat((syms[i], syms[i + 1]))) {
                        if best.map_or(true, |(_, b)| id < b) {
                            best = Some((i, id));
                        }
                    }
                }
                let Some((at, id)) = best else { break };
                let pair = (syms[at], syms[at + 1]);
                syms = merge_pair(&syms, pair, id);
            }
            out.extend(syms);
        }
        out
    }

    /// Concatenates token bytes, skipping specials.
    pub fn decode(&self, ids: &[u32]) -> String {
        let bytes: Vec<u8> = ids.iter().flat_map(|&i| self.bytes(i).iter().copied()).collect();
        String::from_utf8_lossy(&bytes).into_owned()
    }

    /// Human-readable form of one id.
    pub fn token_label(&self, id: u32) -> String {
        match SPECIAL_NAMES.get(id as usize) {
            Some(name) => (*name).to_string(),
            None => escape(self.bytes(id)),
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for s in SPECIAL_NAMES {
            out.push_str(s);
            out.push('\n');
        }
        for t in &self.tokens {
            out.push_str(&escape(t));
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        for (i, want) in SPECIAL_NAMES.iter().enumerate() {
            match lines.next() {
                Some(l) if l == *want => {}
                other => {
                    return Err(Error::data(format!(
                        "vocabulary line {} should be {want:?}, got {other:?}",
                        i + 1
                    )))
                }
            }
        }
        let tokens = lines
            .enumerate()
            .map(|(i, l)| {
                unescape(l).map_err(|e| {
                    Error::data(format!("vocabulary line {}: {e}", i + NUM_SPECIALS + 1))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Vocabulary::from_tokens(tokens)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }
}

fn merge_pair(syms: &[u32], pair: (u32, u32), id: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(syms.len());
    let mut i = 0;
    while i < syms.len() {
        if i + 1 < syms.len() && (syms[i], syms[i + 1]) == pair {
            out.push(id);
            i += 2;
        } else {
            out.push(syms[i]);
            i += 1;
        }
    }
    out
}

/// One token per line: printable characters stay literal, whitespace and
/// backslash use C-style escapes, stray bytes become `\xHH`.
fn escape(bytes: &[u8]) -> String {
    let mut out = String::new();
    let mut rest = bytes;
    while !rest.is_empty() {
        let (valid, bad) = match std::str::from_utf8(rest) {
            Ok(s) => (s, 0),
            Err(e) => {
                let s = std::str::from_utf8(&rest[..e.valid_up_to()]).unwrap();
                (s, e.error_len().unwrap_or(rest.len() - e.valid_up_to()))
            }
        };
        for c in valid.chars() {
            match c {
                ' ' => out.push_str("\\s"),
                '\\' => out.push_str("\\\\"),
                '\t' => out.push_str("\\t"),
                '\n' => out.push_str("\\n"),
                '\r' => out.push_str("\\r"),
                c if c.is_control() || c.is_whitespace() => {
                    let mut buf = [0u8; 4];
                    for b in c.encode_utf8(&mut buf).bytes() {
                        out.push_str(&format!("\\x{b:02x}"));
                    }
                }
                c => out.push(c),
            }
        }
        let consumed = valid.len();
        for b in &rest[consumed..consumed + bad] {
            out.push_str(&format!("\\x{b:02x}"));
        }
        rest = &rest[consumed + bad..];
    }
    out
}

fn unescape(s: &str) -> std::result::Result<Vec<u8>, String> {
    let mut out = Vec::with_capacity(s.len());
    let mut it = s.chars();
    while let Some(c) = it.next() {
        if c != '\\' {
            let mut buf = [0u8; 4];
            out.extend_from_slice(c.encode_utf8(&mut buf).as_bytes());
            continue;
        }
        match it.next() {
            Some('s') => out.push(b' '),
            Some('\\') => out.push(b'\\'),
            Some('t') => out.push(b'\t'),
            Some('n') => out.push(b'\n'),
            Some('r') => out.push(b'\r'),
            Some('x') => {
                let hex: String = it.by_ref().take(2).collect();
                let b = u8::from_str_radix(&hex, 16).map_err(|_| format!("bad escape \\x{hex}"))?;
                out.push(b);
            }
            other => return Err(format!("bad escape \\{}", other.map(String::from).unwrap_or_default())),
        }
    }
    Ok(out)
}
