use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A grammatical sentence and an ungrammatical counterpart.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MinimalPair {
    pub phenomenon: String,
    pub good: String,
    pub bad: String,
}

impl MinimalPair {
    pub fn new(phenomenon: impl Into<String>, good: impl Into<String>, bad: impl Into<String>) -> Result<Self> {
        let pair = Self {
            phenomenon: phenomenon.into(),
            good: good.into(),
            bad: bad.into(),
        };
        if pair.good.is_empty() || pair.bad.is_empty() {
            return Err(Error::config("minimal pair members must be non-empty"));
        }
        if pair.good == pair.bad {
            return Err(Error::config(format!("minimal pair members are identical: {:?}", pair.good)));
        }
        Ok(pair)
    }
}

/// Parses `phenomenon<TAB>good<TAB>bad` lines; blank lines are skipped.
pub fn parse_pairs(text: &str) -> Result<Vec<MinimalPair>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Format {
                what: "pair file",
                detail: format!("line {}: expected 3 tab-separated fields, found {}", i + 1, fields.len()),
            });
        }
        out.push(MinimalPair::new(fields[0], fields[1], fields[2])?);
    }
    Ok(out)
}

pub fn format_pairs(pairs: &[MinimalPair]) -> String {
    pairs
        .iter()
        .map(|p| format!("{}\t{}\t{}\n", p.phenomenon, p.good, p.bad))
        .collect()
}

pub fn read_pairs(path: &Path) -> Result<Vec<MinimalPair>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let text = String::from_utf8(bytes).map_err(|source| Error::Utf8 {
        path: path.display().to_string(),
        source,
    })?;
    parse_pairs(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pair_file_round_trip() {
        let pairs = vec![
            MinimalPair::new("subject_verb", "the dog runs.", "the dog run.").unwrap(),
            MinimalPair::new("attractor", "the cats near the dog sleep.", "the cats near the dog sleeps.").unwrap(),
        ];
        assert_eq!(parse_pairs(&format_pairs(&pairs)).unwrap(), pairs);
        assert!(parse_pairs("a\tb").is_err());
        assert!(parse_pairs("x\tsame\tsame").is_err());
        assert!(MinimalPair::new("x", "", "b").is_err());
    }
}
