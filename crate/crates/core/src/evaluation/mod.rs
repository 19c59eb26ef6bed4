//! Zero-shot scoring: minimal pairs, perplexity and word surprisal.

pub mod pairs;
pub mod report;
pub mod score;
pub mod surprisal;

pub use pairs::{format_pairs, parse_pairs, read_pairs, MinimalPair};
pub use report::{perplexity, PairReport};
pub use score::{
    minimal_pair_accuracy, score_pairs, sentence_scorers, sequence_logprob, sequence_logprob_ids, token_logprobs, PairAccuracy, PairScore,
    ScoreOptions, SentenceScorer, Tally,
};
pub use surprisal::{word_average_surprisal, SurprisalRecord};
