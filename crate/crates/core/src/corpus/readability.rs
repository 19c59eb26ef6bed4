//! Counting rules:
//!
//! * a word is a run of ASCII letters or digits, optionally joined by
//!   apostrophes (`don't` is one word);
//! * a sentence ends at `.`, `!` or `?` followed by whitespace or the end of
//!   the text; text without a terminator counts as one sentence;
//! * syllables are maximal runs of `aeiouy`, minus one for a silent final
//!   `e` (but not consonant + `le`), at least one per word;
//! * complex (polysyllabic) words have three or more syllables;
//! * characters are the letters and digits inside words.

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

static WORD: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"[A-Za-z0-9]+(?:['\u{2019}][A-Za-z0-9]+)*").unwrap());
static SENTENCE_END: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"[.!?]+(?:\s|$)").unwrap());

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReadabilityReport {
    pub flesch_reading_ease: f64,
    pub fk_grade: f64,
    pub gunning_fog: f64,
    pub ari: f64,
    pub smog: f64,
    pub words: u64,
    pub sentences: u64,
    pub syllables: u64,
    pub complex_words: u64,
    pub characters: u64,
}

fn is_vowel(c: u8) -> bool {
    matches!(c, b'a' | b'e' | b'i' | b'o' | b'u' | b'y')
}

pub fn count_syllables(word: &str) -> u64 {
    let w: Vec<u8> = word.bytes().filter(u8::is_ascii_alphabetic).map(|b| b.to_ascii_lowercase()).collect();
    let mut groups = 0u64;
    let mut prev = false;
    for &c in &w {
        let v = is_vowel(c);
        if v && !prev {
            groups += 1;
        }
        prev = v;
    }
    let n = w.len();
    if n >= 2 && w[n - 1] == b'e' && !is_vowel(w[n - 2]) {
        let consonant_le = n >= 3 && w[n - 2] == b'l' && !is_vowel(w[n - 3]);
        if !consonant_le {
            groups = groups.saturating_sub(1);
        }
    }
    groups.max(1)
}

pub fn compute_readability(text: &str) -> Result<ReadabilityReport> {
    let words: Vec<&str> = WORD.find_iter(text).map(|m| m.as_str()).collect();
    if text.trim().is_empty() || words.is_empty() {
        return Err(Error::Degenerate("readability needs at least one word".into()));
    }
    let sentences = (SENTENCE_END.find_iter(text).count() as u64).max(1);
    let mut syllables = 0u64;
    let mut complex = 0u64;
    let mut characters = 0u64;
    for w in &words {
        let s = count_syllables(w);
        syllables += s;
        complex += (s >= 3) as u64;
        characters += w.bytes().filter(u8::is_ascii_alphanumeric).count() as u64;
    }
    let n_words = words.len() as u64;
    let (w, s, syl, c, ch) = (n_words as f64, sentences as f64, syllables as f64, complex as f64, characters as f64);
    let wps = w / s;
    let spw = syl / w;
    Ok(ReadabilityReport {
        flesch_reading_ease: 206.835 - 1.015 * wps - 84.6 * spw,
        fk_grade: 0.39 * wps + 11.8 * spw - 15.59,
        gunning_fog: 0.4 * (wps + 100.0 * c / w),
        ari: 4.71 * ch / w + 0.5 * wps - 21.43,
        smog: 1.0430 * (c * 30.0 / s).sqrt() + 3.1291,
        words: n_words,
        sentences,
        syllables,
        complex_words: complex,
        characters,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn syllable_heuristic() {
        let cases = [
            ("the", 1),
            ("cat", 1),
            ("table", 2),
            ("cake", 1),
            ("beautiful", 3),
            ("rhythm", 1),
            ("queue", 1),
            ("readability", 5),
            ("a", 1),
            ("don't", 1),
        ];
        for (w, n) in cases {
            assert_eq!(count_syllables(w), n, "{w}");
        }
    }

    #[test]
    fn hand_computed_fixture() {
        let r = compute_readability("The cat sat. The dog ran.").unwrap();
        assert_eq!((r.words, r.sentences, r.syllables, r.complex_words, r.characters), (6, 2, 6, 0, 18));
        assert!((r.flesch_reading_ease - 119.19).abs() < 1e-9);
        assert!((r.fk_grade - -2.62).abs() < 1e-9);
        assert!((r.gunning_fog - 1.2).abs() < 1e-12);
        assert!((r.ari - (4.71 * 3.0 + 1.5 - 21.43)).abs() < 1e-12);
        assert_eq!(r.smog, 3.1291);
    }

    #[test]
    fn smog_without_polysyllables() {
        let text = "I ran. ".repeat(30);
        let r = compute_readability(&text).unwrap();
        assert_eq!(r.sentences, 30);
        assert_eq!(r.smog, 3.1291);
        assert!(compute_readability("  \n").is_err());
        assert_eq!(compute_readability("no terminator here").unwrap().sentences, 1);
    }

    proptest! {
        #[test]
        fn sentence_order_does_not_matter(
            sentences in prop::collection::vec("[A-Za-z]{1,9}( [a-z]{1,12}){0,6}[.!?]", 1..8),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut shuffled = sentences.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let a = compute_readability(&sentences.join(" ")).unwrap();
            let b = compute_readability(&shuffled.join(" ")).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
