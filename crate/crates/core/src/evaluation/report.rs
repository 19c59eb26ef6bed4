//! Perplexity and minimal-pair reports.

use std::collections::BTreeMap;
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::score::PairAccuracy;
use crate::dataloader::Chunk;
use crate::error::Result;
use crate::model::LanguageModel;
use crate::tensor::Scalar;
use crate::training::evaluate_loss;

/// `exp` of the mean per-token cross-entropy over `chunks`.
pub fn perplexity<S: Scalar>(model: &dyn LanguageModel<S>, chunks: &[Chunk], eval_batch: usize) -> Result<f64> {
    Ok(evaluate_loss(model, chunks, eval_batch)?.exp())
}

/// Accuracies in percent, keyed by phenomenon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairReport {
    pub checkpoint_sha256: Option<String>,
    pub n_pairs: usize,
    pub overall: f64,
    pub phenomena: BTreeMap<String, f64>,
}

impl PairReport {
    pub fn new(acc: &PairAccuracy, checkpoint_sha256: Option<String>) -> Self {
        Self {
            checkpoint_sha256,
            n_pairs: acc.overall.total,
            overall: acc.overall.percent(),
            phenomena: acc.phenomena.iter().map(|(k, t)| (k.clone(), t.percent())).collect(),
        }
    }

    pub fn to_table(&self) -> String {
        let width = self.phenomena.keys().map(String::len).chain([7]).max().unwrap_or(7);
        let mut out = String::new();
        writeln!(out, "{:<width$}  accuracy", "phenomenon").unwrap();
        for (k, v) in &self.phenomena {
            writeln!(out, "{k:<width$}  {v:>7.2}%").unwrap();
        }
        writeln!(out, "{:<width$}  {:>7.2}%  ({} pairs)", "overall", self.overall, self.n_pairs).unwrap();
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::Tally;

    #[test]
    fn table_lists_every_phenomenon() {
        let acc = PairAccuracy {
            overall: Tally { correct: 3, total: 4 },
            phenomena: [("attractor".to_string(), Tally { correct: 1, total: 2 }), ("subject_verb".to_string(), Tally { correct: 2, total: 2 })].into(),
        };
        let r = PairReport::new(&acc, None);
        assert_eq!(r.overall, 75.0);
        let t = r.to_table();
        assert!(t.contains("attractor") && t.contains("50.00%") && t.contains("100.00%") && t.contains("(4 pairs)"));
    }
}
