//! Byte-level BPE.
//!
//! Ids 0..4 are the specials (`<pad>`, `<bos>`, `<eos>`, `<unk>`), ids
//! 4..260 the 256 byte values, and every later id the result of a learned
//! merge. Text is split into pre-tokens first: each run of non-whitespace,
//! taking along a single space directly before it, and each remaining run
//! of whitespace on its own. A sentence-initial word therefore encodes the
//! same way at the start of a text as after a newline. Merges never cross
//! pre-token boundaries.

pub mod files;

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashMap, HashSet};
use std::path::{Component, Path};
use std::sync::LazyLock;

use regex::Regex;

use crate::error::{Error, Result};

pub use files::{bytes_to_unicode, TokenizerMeta};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];
pub const BYTE_OFFSET: u32 = 4;
pub const BASE_VOCAB: usize = 4 + 256;
pub const DEFAULT_VOCAB: usize = 16000;

static WORD: LazyLock<Regex> = LazyLock::new(|| Regex::new(r" ?\S+").unwrap());

/// Splits `text` into pre-tokens; concatenating them gives `text` back.
pub fn pretokenize(text: &str) -> impl Iterator<Item = &str> {
    let mut pieces = Vec::new();
    let mut pos = 0;
    for m in WORD.find_iter(text) {
        if m.start() > pos {
            pieces.push(&text[pos..m.start()]);
        }
        pieces.push(m.as_str());
        pos = m.end();
    }
    if pos < text.len() {
        pieces.push(&text[pos..]);
    }
    pieces.into_iter()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Merge {
    pub left: u32,
    pub right: u32,
    pub result: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BpeConfig {
    pub target_vocab: usize,
    /// Pairs seen fewer times than this are never merged.
    pub min_frequency: u64,
}

impl Default for BpeConfig {
    fn default() -> Self {
        Self {
            target_vocab: DEFAULT_VOCAB,
            min_frequency: 2,
        }
    }
}

/// A trained vocabulary and its ordered merge list.
#[derive(Debug, Clone)]
pub struct TokenizerModel {
    tokens: Vec<Vec<u8>>,
    lookup: HashMap<Vec<u8>, u32>,
    merges: Vec<Merge>,
    ranks: HashMap<(u32, u32), (u32, u32)>,
}

impl PartialEq for TokenizerModel {
    fn eq(&self, other: &Self) -> bool {
        self.tokens == other.tokens && self.merges == other.merges
    }
}

impl TokenizerModel {
    /// Specials and raw bytes only.
    pub fn base() -> Self {
        let mut tokens: Vec<Vec<u8>> = vec![Vec::new(); 4];
        tokens.extend((0..=255u8).map(|b| vec![b]));
        let lookup = tokens.iter().enumerate().skip(4).map(|(i, t)| (t.clone(), i as u32)).collect();
        Self {
            tokens,
            lookup,
            merges: Vec::new(),
            ranks: HashMap::new(),
        }
    }

    /// Rebuilds a model from its merge list (pairs of token ids).
    pub fn from_merges(pairs: &[(u32, u32)]) -> Result<Self> {
        let mut m = Self::base();
        for &(l, r) in pairs {
            if l as usize >= m.tokens.len() || r as usize >= m.tokens.len() || l < BYTE_OFFSET || r < BYTE_OFFSET {
                return Err(Error::Format {
                    what: "merges",
                    detail: format!("merge ({l}, {r}) refers to an unknown token"),
                });
            }
            m.push_merge(l, r);
        }
        Ok(m)
    }

    fn push_merge(&mut self, left: u32, right: u32) -> u32 {
        let mut bytes = self.tokens[left as usize].clone();
        bytes.extend_from_slice(&self.tokens[right as usize]);
        let result = match self.lookup.get(&bytes) {
            Some(&id) => id,
            None => {
                let id = self.tokens.len() as u32;
                self.lookup.insert(bytes.clone(), id);
                self.tokens.push(bytes);
                id
            }
        };
        self.ranks.entry((left, right)).or_insert((self.merges.len() as u32, result));
        self.merges.push(Merge { left, right, result });
        result
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn merges(&self) -> &[Merge] {
        &self.merges
    }

    /// Raw bytes of a token; empty for specials.
    pub fn token_bytes(&self, id: u32) -> Option<&[u8]> {
        self.tokens.get(id as usize).map(Vec::as_slice)
    }

    pub fn id_of(&self, bytes: &[u8]) -> Option<u32> {
        self.lookup.get(bytes).copied()
    }

    fn encode_piece(&self, piece: &[u8], out: &mut Vec<u32>) {
        let mut syms: Vec<u32> = piece.iter().map(|&b| b as u32 + BYTE_OFFSET).collect();
        while syms.len() > 1 {
            let best = syms
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0], w[1])).map(|&(rank, result)| (rank, w[0], w[1], result)))
                .min();
            let Some((_, l, r, result)) = best else { break };
            let mut merged = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && syms[i] == l && syms[i + 1] == r {
                    merged.push(result);
                    i += 2;
                } else {
                    merged.push(syms[i]);
                    i += 1;
                }
            }
            syms = merged;
        }
        out.extend(syms);
    }

    /// Token ids of `text`; no specials are inserted.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::with_capacity(text.len() / 3);
        for piece in pretokenize(text) {
            self.encode_piece(piece.as_bytes(), &mut out);
        }
        out
    }

    /// Like [`encode`](Self::encode), memoizing pre-token encodings.
    pub fn encode_cached(&self, text: &str, cache: &mut HashMap<String, Vec<u32>>) -> Vec<u32> {
        let mut out = Vec::with_capacity(text.len() / 3);
        for piece in pretokenize(text) {
            if let Some(ids) = cache.get(piece) {
                out.extend_from_slice(ids);
            } else {
                let mut ids = Vec::new();
                self.encode_piece(piece.as_bytes(), &mut ids);
                out.extend_from_slice(&ids);
                cache.insert(piece.to_string(), ids);
            }
        }
        out
    }

    pub fn decode_bytes(&self, ids: &[u32]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &id in ids {
            let t = self.tokens.get(id as usize).ok_or(Error::TokenOutOfRange {
                id,
                vocab: self.tokens.len(),
            })?;
            out.extend_from_slice(t);
        }
        Ok(out)
    }

    /// Concatenated token bytes; specials render as nothing and invalid
    /// UTF-8 (from a partial sequence) is replaced.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        Ok(String::from_utf8_lossy(&self.decode_bytes(ids)?).into_owned())
    }
}

struct Word {
    syms: Vec<u32>,
    count: u64,
}

fn pairs_of(syms: &[u32]) -> impl Iterator<Item = (u32, u32)> + '_ {
    syms.windows(2).map(|w| (w[0], w[1]))
}

/// Heap entry: highest count first, then the lexicographically smallest
/// pair of token byte strings.
#[derive(PartialEq, Eq)]
struct Candidate {
    count: u64,
    key: Reverse<(Vec<u8>, Vec<u8>)>,
    pair: (u32, u32),
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.count.cmp(&other.count).then_with(|| self.key.cmp(&other.key))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

pub fn train_bpe<'a>(corpus: impl IntoIterator<Item = &'a str>, target_vocab: usize) -> Result<TokenizerModel> {
    train_bpe_with(
        corpus,
        BpeConfig {
            target_vocab,
            ..BpeConfig::default()
        },
    )
}

/// Greedy BPE: repeatedly merges the most frequent adjacent pair until the
/// vocabulary reaches `target_vocab` or no pair is frequent enough.
pub fn train_bpe_with<'a>(corpus: impl IntoIterator<Item = &'a str>, cfg: BpeConfig) -> Result<TokenizerModel> {
    if cfg.target_vocab <= BASE_VOCAB {
        return Err(Error::config(format!(
            "target vocabulary {} must exceed the {BASE_VOCAB} specials and bytes",
            cfg.target_vocab
        )));
    }
    let mut freq: HashMap<&str, u64> = HashMap::new();
    let mut any = false;
    for text in corpus {
        any |= !text.is_empty();
        for piece in pretokenize(text) {
            *freq.entry(piece).or_default() += 1;
        }
    }
    if !any {
        return Err(Error::Degenerate("cannot train a tokenizer on an empty corpus".into()));
    }
    let mut entries: Vec<(&str, u64)> = freq.into_iter().collect();
    entries.sort_unstable();
    let mut words: Vec<Word> = entries
        .into_iter()
        .map(|(p, count)| Word {
            syms: p.bytes().map(|b| b as u32 + BYTE_OFFSET).collect(),
            count,
        })
        .collect();

    let mut model = TokenizerModel::base();
    let mut counts: HashMap<(u32, u32), u64> = HashMap::new();
    let mut where_: HashMap<(u32, u32), HashSet<usize>> = HashMap::new();
    for (i, w) in words.iter().enumerate() {
        for p in pairs_of(&w.syms) {
            *counts.entry(p).or_default() += w.count;
            where_.entry(p).or_default().insert(i);
        }
    }
    let candidate = |m: &TokenizerModel, pair: (u32, u32), count: u64| Candidate {
        count,
        key: Reverse((m.tokens[pair.0 as usize].clone(), m.tokens[pair.1 as usize].clone())),
        pair,
    };
    let mut heap: BinaryHeap<Candidate> = counts.iter().map(|(&p, &c)| candidate(&model, p, c)).collect();

    while model.vocab_size() < cfg.target_vocab {
        let Some(top) = heap.pop() else { break };
        if counts.get(&top.pair).copied().unwrap_or(0) != top.count {
            continue;
        }
        if top.count < cfg.min_frequency.max(1) {
            break;
        }
        let (l, r) = top.pair;
        let result = model.push_merge(l, r);
        let mut touched: HashMap<(u32, u32), u64> = HashMap::new();
        let mut affected: Vec<usize> = where_.remove(&top.pair).unwrap_or_default().into_iter().collect();
        affected.sort_unstable();
        for i in affected {
            let w = &mut words[i];
            if !pairs_of(&w.syms).any(|p| p == (l, r)) {
                continue;
            }
            for p in pairs_of(&w.syms) {
                let c = counts.get_mut(&p).unwrap();
                *c -= w.count;
                touched.insert(p, *c);
            }
            let mut merged = Vec::with_capacity(w.syms.len());
            let mut j = 0;
            while j < w.syms.len() {
                if j + 1 < w.syms.len() && w.syms[j] == l && w.syms[j + 1] == r {
                    merged.push(result);
                    j += 2;
                } else {
                    merged.push(w.syms[j]);
                    j += 1;
                }
            }
            w.syms = merged;
            for p in pairs_of(&w.syms) {
                let c = counts.entry(p).or_default();
                *c += w.count;
                touched.insert(p, *c);
                where_.entry(p).or_default().insert(i);
            }
        }
        counts.remove(&(l, r));
        let mut touched: Vec<_> = touched.into_iter().filter(|&(p, _)| p != (l, r)).collect();
        touched.sort_unstable();
        for (p, c) in touched {
            if c > 0 {
                heap.push(candidate(&model, p, c));
            } else {
                counts.remove(&p);
            }
        }
    }
    Ok(model)
}

/// True when any path component or the file extension is `dev`, `test`,
/// `valid` or `validation`.
pub fn is_heldout_path(path: &Path) -> bool {
    let tag = |s: &str| matches!(s.to_ascii_lowercase().as_str(), "dev" | "test" | "valid" | "validation");
    path.components().any(|c| matches!(c, Component::Normal(s) if tag(&s.to_string_lossy())))
        || path.extension().is_some_and(|e| tag(&e.to_string_lossy()))
}

/// Trains on the given training files, refusing held-out paths.
pub fn train_bpe_files(paths: &[&Path], cfg: BpeConfig) -> Result<TokenizerModel> {
    if let Some(p) = paths.iter().find(|p| is_heldout_path(p)) {
        return Err(Error::Leakage(p.to_path_buf()));
    }
    let mut texts = Vec::with_capacity(paths.len());
    for p in paths {
        let bytes = std::fs::read(p).map_err(|e| Error::io(p, e))?;
        texts.push(String::from_utf8(bytes).map_err(|source| Error::Utf8 {
            path: p.display().to_string(),
            source,
        })?);
    }
    train_bpe_with(texts.iter().map(String::as_str), cfg)
}
