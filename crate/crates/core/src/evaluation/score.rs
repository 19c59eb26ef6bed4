//! Sentence log-probabilities and minimal-pair accuracy.

use std::collections::BTreeMap;
use std::thread;

use serde::{Deserialize, Serialize};

use super::pairs::MinimalPair;
use crate::error::{Error, Result};
use crate::model::LanguageModel;
use crate::registry::Registry;
use crate::tensor::{log_sum_exp, Scalar};
use crate::tokenizer::{TokenizerModel, BOS};

/// Reduces per-token log-probabilities to one sentence score.
pub trait SentenceScorer: Send + Sync {
    fn name(&self) -> &'static str;
    fn score(&self, token_logprobs: &[f64]) -> f64;
}

/// Total log-probability.
pub struct SumScorer;

impl SentenceScorer for SumScorer {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn score(&self, lp: &[f64]) -> f64 {
        lp.iter().sum()
    }
}

/// Log-probability per scored token.
pub struct TokenMeanScorer;

impl SentenceScorer for TokenMeanScorer {
    fn name(&self) -> &'static str {
        "token_mean"
    }

    fn score(&self, lp: &[f64]) -> f64 {
        lp.iter().sum::<f64>() / lp.len().max(1) as f64
    }
}

pub fn sentence_scorers() -> Registry<dyn SentenceScorer> {
    let mut r: Registry<dyn SentenceScorer> = Registry::new("sentence scorer");
    r.register("sum", |_| Ok(Box::new(SumScorer)));
    r.register("token_mean", |_| Ok(Box::new(TokenMeanScorer)));
    r
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreOptions {
    pub scorer: String,
    /// Prepend `<bos>` so the first text token is scored too.
    pub bos: bool,
    /// Worker threads; 0 picks the available parallelism.
    pub threads: usize,
}

impl Default for ScoreOptions {
    fn default() -> Self {
        Self {
            scorer: "sum".into(),
            bos: false,
            threads: 0,
        }
    }
}

impl ScoreOptions {
    fn workers(&self) -> usize {
        match self.threads {
            0 => thread::available_parallelism().map_or(1, |n| n.get()),
            n => n,
        }
    }
}

/// `ln p(ids[t] | ids[..t])` for every `t >= 1`.
pub fn token_logprobs<S: Scalar>(model: &dyn LanguageModel<S>, ids: &[u32]) -> Result<Vec<f64>> {
    if ids.len() < 2 {
        return Err(Error::Degenerate(format!("need at least 2 tokens to score, got {}", ids.len())));
    }
    if ids.len() > model.max_seq() {
        return Err(Error::SequenceTooLong {
            len: ids.len(),
            max_seq: model.max_seq(),
        });
    }
    let v = model.vocab_size();
    let logits = model.logits(ids, 1, ids.len())?;
    Ok((1..ids.len())
        .map(|t| {
            let row: Vec<f64> = logits[(t - 1) * v..t * v].iter().map(|x| x.f64()).collect();
            row[ids[t] as usize] - log_sum_exp(&row)
        })
        .collect())
}

/// Summed log-probability of `ids`; the first token is context only.
pub fn sequence_logprob_ids<S: Scalar>(model: &dyn LanguageModel<S>, ids: &[u32]) -> Result<f64> {
    Ok(token_logprobs(model, ids)?.iter().sum())
}

pub fn encode_for_scoring(tokenizer: &TokenizerModel, text: &str, bos: bool) -> Vec<u32> {
    let mut ids = Vec::with_capacity(text.len() / 2 + 1);
    if bos {
        ids.push(BOS);
    }
    ids.extend(tokenizer.encode(text));
    ids
}

pub fn sequence_logprob<S: Scalar>(model: &dyn LanguageModel<S>, tokenizer: &TokenizerModel, text: &str, bos: bool) -> Result<f64> {
    sequence_logprob_ids(model, &encode_for_scoring(tokenizer, text, bos))
}

/// Scores each sequence in its own forward pass, spread over worker
/// threads; results come back in input order.
pub fn score_sequences<S: Scalar>(model: &dyn LanguageModel<S>, seqs: &[Vec<u32>], scorer: &dyn SentenceScorer, threads: usize) -> Result<Vec<f64>> {
    if seqs.is_empty() {
        return Ok(Vec::new());
    }
    let per = seqs.len().div_ceil(threads.max(1));
    let parts: Vec<Result<Vec<f64>>> = thread::scope(|s| {
        let handles: Vec<_> = seqs
            .chunks(per)
            .map(|part| s.spawn(move || part.iter().map(|ids| token_logprobs(model, ids).map(|lp| scorer.score(&lp))).collect()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("scoring thread panicked")).collect()
    });
    let mut out = Vec::with_capacity(seqs.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub correct: usize,
    pub total: usize,
}

impl Tally {
    /// Percentage; 0 for an empty tally.
    pub fn percent(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            100.0 * self.correct as f64 / self.total as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairScore {
    pub good: f64,
    pub bad: f64,
}

impl PairScore {
    /// Ties count as wrong.
    pub fn correct(&self) -> bool {
        self.good > self.bad
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairAccuracy {
    pub overall: Tally,
    pub phenomena: BTreeMap<String, Tally>,
}

pub fn tally_pairs(pairs: &[MinimalPair], scores: &[PairScore]) -> PairAccuracy {
    let mut overall = Tally { correct: 0, total: 0 };
    let mut phenomena: BTreeMap<String, Tally> = BTreeMap::new();
    for (p, s) in pairs.iter().zip(scores) {
        let hit = s.correct() as usize;
        let t = phenomena.entry(p.phenomenon.clone()).or_insert(Tally { correct: 0, total: 0 });
        t.correct += hit;
        t.total += 1;
        overall.correct += hit;
        overall.total += 1;
    }
    PairAccuracy { overall, phenomena }
}

pub fn score_pairs<S: Scalar>(model: &dyn LanguageModel<S>, tokenizer: &TokenizerModel, pairs: &[MinimalPair], opts: &ScoreOptions) -> Result<Vec<PairScore>> {
    let scorer = sentence_scorers().create(&opts.scorer, &())?;
    let seqs: Vec<Vec<u32>> = pairs
        .iter()
        .flat_map(|p| [&p.good, &p.bad])
        .map(|t| encode_for_scoring(tokenizer, t, opts.bos))
        .collect();
    let flat = score_sequences(model, &seqs, scorer.as_ref(), opts.workers())?;
    Ok(flat.chunks(2).map(|c| PairScore { good: c[0], bad: c[1] }).collect())
}

pub fn minimal_pair_accuracy<S: Scalar>(model: &dyn LanguageModel<S>, tokenizer: &TokenizerModel, pairs: &[MinimalPair], opts: &ScoreOptions) -> Result<PairAccuracy> {
    if pairs.is_empty() {
        return Err(Error::Degenerate("no minimal pairs to score".into()));
    }
    Ok(tally_pairs(pairs, &score_pairs(model, tokenizer, pairs, opts)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tie_counts_as_wrong() {
        assert!(PairScore { good: -10.0, bad: -12.0 }.correct());
        assert!(!PairScore { good: -3.0, bad: -3.0 }.correct());
        assert!(!PairScore { good: -12.0, bad: -10.0 }.correct());
    }

    #[test]
    fn tallies_by_phenomenon() {
        let pairs = vec![
            MinimalPair::new("a", "x y", "y x").unwrap(),
            MinimalPair::new("a", "x z", "z x").unwrap(),
            MinimalPair::new("b", "p q", "q p").unwrap(),
        ];
        let scores = vec![
            PairScore { good: -1.0, bad: -2.0 },
            PairScore { good: -2.0, bad: -1.0 },
            PairScore { good: -1.0, bad: -1.5 },
        ];
        let acc = tally_pairs(&pairs, &scores);
        assert_eq!(acc.overall, Tally { correct: 2, total: 3 });
        assert_eq!(acc.phenomena["a"].percent(), 50.0);
        assert_eq!(acc.phenomena["b"].percent(), 100.0);
    }

    #[test]
    fn scorers_reduce_as_named() {
        let lp = [-1.0, -2.0, -3.0];
        let reg = sentence_scorers();
        assert_eq!(reg.create("sum", &()).unwrap().score(&lp), -6.0);
        assert_eq!(reg.create("token_mean", &()).unwrap().score(&lp), -2.0);
        assert!(reg.create("max", &()).is_err());
    }
}
