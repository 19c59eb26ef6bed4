//! Average per-word surprisal over the contexts a word appears in.
//!
//! Each line of the corpus is one context. An occurrence is a
//! whitespace-delimited word equal to the query once trailing ASCII
//! punctuation is stripped; its surprisal is the summed negative
//! log-probability of the word's own tokens given everything before it on
//! the line. Occurrences at the start of a line have no context and are
//! skipped unless `<bos>` is prepended. Contexts longer than the model
//! window keep only their most recent tokens.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::score::token_logprobs;
use crate::error::{Error, Result};
use crate::model::LanguageModel;
use crate::tensor::Scalar;
use crate::tokenizer::{pretokenize, TokenizerModel, BOS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurprisalRecord {
    pub word: String,
    pub n_contexts: usize,
    /// Nats.
    pub mean_surprisal: f64,
}

pub const N_SUGGESTIONS: usize = 5;

/// Byte spans `(pretoken_start, word_end)` of `word` in `line`.
fn occurrences(line: &str, word: &str) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut pos = 0;
    for piece in pretokenize(line) {
        let start = pos;
        pos += piece.len();
        let core_start = start + (piece.len() - piece.trim_start().len());
        let core = line[core_start..pos].trim_end_matches(|c: char| c.is_ascii_punctuation());
        if !core.is_empty() && core == word {
            out.push((start, core_start + core.len()));
        }
    }
    out
}

fn nearest_words(corpus: &str, word: &str) -> Vec<String> {
    let words: BTreeSet<&str> = corpus
        .split_whitespace()
        .map(|w| w.trim_end_matches(|c: char| c.is_ascii_punctuation()))
        .filter(|w| !w.is_empty())
        .collect();
    let mut ranked: Vec<(usize, &str)> = words.into_iter().map(|w| (strsim::levenshtein(w, word), w)).collect();
    ranked.sort_unstable();
    ranked.into_iter().take(N_SUGGESTIONS).map(|(_, w)| w.to_string()).collect()
}

/// Surprisal of one occurrence, or `None` when it has no context.
fn occurrence_surprisal<S: Scalar>(model: &dyn LanguageModel<S>, tokenizer: &TokenizerModel, line: &str, span: (usize, usize), bos: bool) -> Result<Option<f64>> {
    let mut ids = Vec::new();
    if bos {
        ids.push(BOS);
    }
    ids.extend(tokenizer.encode(&line[..span.0]));
    let n_ctx = ids.len();
    let word_ids = tokenizer.encode(&line[span.0..span.1]);
    if n_ctx == 0 {
        return Ok(None);
    }
    if word_ids.len() >= model.max_seq() {
        return Err(Error::SequenceTooLong {
            len: word_ids.len() + 1,
            max_seq: model.max_seq(),
        });
    }
    ids.extend_from_slice(&word_ids);
    let window = &ids[ids.len().saturating_sub(model.max_seq())..];
    let lp = token_logprobs(model, window)?;
    Ok(Some(-lp[lp.len() - word_ids.len()..].iter().sum::<f64>()))
}

pub fn word_average_surprisal<S: Scalar>(model: &dyn LanguageModel<S>, tokenizer: &TokenizerModel, corpus: &str, word: &str, bos: bool) -> Result<SurprisalRecord> {
    let not_found = || Error::WordNotFound {
        word: word.to_string(),
        suggestions: nearest_words(corpus, word),
    };
    if word.is_empty() || word.contains(char::is_whitespace) {
        return Err(not_found());
    }
    let mut values = Vec::new();
    let mut seen = 0usize;
    for line in corpus.lines() {
        for span in occurrences(line, word) {
            seen += 1;
            if let Some(s) = occurrence_surprisal(model, tokenizer, line, span, bos)? {
                values.push(s);
            }
        }
    }
    if seen == 0 {
        return Err(not_found());
    }
    if values.is_empty() {
        return Err(Error::Degenerate(format!(
            "{word:?} only occurs at the start of a line; enable bos to score it"
        )));
    }
    Ok(SurprisalRecord {
        word: word.to_string(),
        n_contexts: values.len(),
        mean_surprisal: values.iter().sum::<f64>() / values.len() as f64,
    })
}
