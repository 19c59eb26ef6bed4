//! On-disk tokenizer format: `vocab.json` (token string to id),
//! `merges.txt` (one `left right` pair per line after a version header) and
//! `tokenizer.json` (ids of the specials and sizes). Token strings use the
//! printable byte-to-character mapping common to byte-level BPE tools, so
//! neither file ever contains a raw space or control byte.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::LazyLock;

use serde::{Deserialize, Serialize};

use super::{TokenizerModel, BASE_VOCAB, BOS, BYTE_OFFSET, EOS, PAD, SPECIALS, UNK};
use crate::error::{Error, Result};
use crate::model::checkpoint::write_atomic;

pub const VOCAB_FILE: &str = "vocab.json";
pub const MERGES_FILE: &str = "merges.txt";
pub const META_FILE: &str = "tokenizer.json";
const MERGES_HEADER: &str = "#version: 0.2";

/// Byte value to printable character.
pub fn bytes_to_unicode() -> &'static [char; 256] {
    static TABLE: LazyLock<[char; 256]> = LazyLock::new(|| {
        let mut table = ['\0'; 256];
        let printable = |b: u32| (33..=126).contains(&b) || (161..=172).contains(&b) || (174..=255).contains(&b);
        let mut next = 256u32;
        for b in 0..256u32 {
            table[b as usize] = if printable(b) {
                char::from_u32(b).unwrap()
            } else {
                let c = char::from_u32(next).unwrap();
                next += 1;
                c
            };
        }
        table
    });
    &TABLE
}

fn unicode_to_bytes() -> &'static HashMap<char, u8> {
    static INV: LazyLock<HashMap<char, u8>> =
        LazyLock::new(|| bytes_to_unicode().iter().enumerate().map(|(b, &c)| (c, b as u8)).collect());
    &INV
}

fn render(bytes: &[u8]) -> String {
    let t = bytes_to_unicode();
    bytes.iter().map(|&b| t[b as usize]).collect()
}

fn unrender(s: &str) -> Option<Vec<u8>> {
    let inv = unicode_to_bytes();
    s.chars().map(|c| inv.get(&c).copied()).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenizerMeta {
    pub kind: String,
    pub vocab_size: usize,
    pub n_merges: usize,
    pub byte_offset: u32,
    pub pad: u32,
    pub bos: u32,
    pub eos: u32,
    pub unk: u32,
}

impl TokenizerModel {
    pub fn meta(&self) -> TokenizerMeta {
        TokenizerMeta {
            kind: "byte_bpe".into(),
            vocab_size: self.vocab_size(),
            n_merges: self.merges().len(),
            byte_offset: BYTE_OFFSET,
            pad: PAD,
            bos: BOS,
            eos: EOS,
            unk: UNK,
        }
    }

    pub fn vocab_json(&self) -> Result<String> {
        let mut map = serde_json::Map::new();
        for id in 0..self.vocab_size() as u32 {
            let key = match SPECIALS.get(id as usize) {
                Some(s) => s.to_string(),
                None => render(self.token_bytes(id).unwrap()),
            };
            map.insert(key, id.into());
        }
        Ok(serde_json::to_string_pretty(&map)?)
    }

    pub fn merges_txt(&self) -> String {
        let mut out = String::from(MERGES_HEADER);
        out.push('\n');
        for m in self.merges() {
            out.push_str(&render(self.token_bytes(m.left).unwrap()));
            out.push(' ');
            out.push_str(&render(self.token_bytes(m.right).unwrap()));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write_atomic(&dir.join(VOCAB_FILE), self.vocab_json()?.as_bytes())?;
        write_atomic(&dir.join(MERGES_FILE), self.merges_txt().as_bytes())?;
        write_atomic(&dir.join(META_FILE), serde_json::to_string_pretty(&self.meta())?.as_bytes())
    }

    /// Parses `merges.txt`; the vocabulary follows from the merge order.
    pub fn from_merges_txt(text: &str) -> Result<Self> {
        let bad = |detail: String| Error::Format { what: "merges", detail };
        let mut model = Self::base();
        let mut pairs = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.is_empty() || (n == 0 && line.starts_with("#version")) {
                continue;
            }
            let (l, r) = line.split_once(' ').ok_or_else(|| bad(format!("line {}: expected two tokens", n + 1)))?;
            let lookup = |s: &str, m: &TokenizerModel| {
                unrender(s)
                    .and_then(|b| m.id_of(&b))
                    .ok_or_else(|| bad(format!("line {}: unknown token {s:?}", n + 1)))
            };
            let pair = (lookup(l, &model)?, lookup(r, &model)?);
            model.push_merge(pair.0, pair.1);
            pairs.push(pair);
        }
        Ok(model)
    }

    /// Loads a saved tokenizer and checks that its three files agree.
    pub fn load(dir: &Path) -> Result<Self> {
        let read = |name: &str| {
            let p = dir.join(name);
            fs::read_to_string(&p).map_err(|e| Error::io(&p, e))
        };
        let model = Self::from_merges_txt(&read(MERGES_FILE)?)?;
        let meta: TokenizerMeta = serde_json::from_str(&read(META_FILE)?)?;
        if meta != model.meta() {
            return Err(Error::Format {
                what: "tokenizer",
                detail: format!("{META_FILE} does not match {MERGES_FILE}"),
            });
        }
        let vocab: serde_json::Map<String, serde_json::Value> = serde_json::from_str(&read(VOCAB_FILE)?)?;
        if vocab.len() != model.vocab_size() || model.vocab_json()? != serde_json::to_string_pretty(&vocab)? {
            return Err(Error::Format {
                what: "tokenizer",
                detail: format!("{VOCAB_FILE} does not match {MERGES_FILE}"),
            });
        }
        debug_assert!(model.vocab_size() >= BASE_VOCAB);
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::train_bpe;

    #[test]
    fn byte_table_is_a_bijection_onto_printables() {
        let t = bytes_to_unicode();
        let distinct: std::collections::HashSet<char> = t.iter().copied().collect();
        assert_eq!(distinct.len(), 256);
        assert!(t.iter().all(|c| !c.is_whitespace() && !c.is_control()));
        assert_eq!(t[b'a' as usize], 'a');
        assert_eq!(t[b' ' as usize], '\u{120}');
    }

    #[test]
    fn save_and_load_round_trip() {
        let text = "the cat sat on the mat\nthe dog sat on the log\n";
        let m = train_bpe([text], 300).unwrap();
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path()).unwrap();
        let back = TokenizerModel::load(dir.path()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.encode(text), m.encode(text));
        let vocab: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join(VOCAB_FILE)).unwrap()).unwrap();
        assert_eq!(vocab["<unk>"], 3);
        assert_eq!(vocab["a"], BYTE_OFFSET + b'a' as u32);
    }

    #[test]
    fn tampered_files_are_rejected() {
        let m = train_bpe(["abab abab abab"], 262).unwrap();
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path()).unwrap();
        fs::write(dir.path().join(MERGES_FILE), "#version: 0.2\na b\n").unwrap();
        assert!(TokenizerModel::load(dir.path()).is_err());
        fs::write(dir.path().join(MERGES_FILE), "#version: 0.2\nzz q\n").unwrap();
        assert!(TokenizerModel::load(dir.path()).is_err());
    }
}
