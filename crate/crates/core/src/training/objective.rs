use std::sync::Arc;

use crate::distillation::{cross_entropy, next_token_targets, KdObjective, KdWeights, LossBreakdown};
use crate::error::{Error, Result};
use crate::model::LanguageModel;
use crate::registry::Registry;
use crate::tensor::Scalar;

/// A training loss over next-token logits of a `[batch, seq]` token block.
pub trait Objective<S: Scalar>: Send + Sync {
    fn name(&self) -> &'static str;
    /// Returns the loss and its gradient with respect to `logits`.
    fn loss(&self, tokens: &[u32], batch: usize, seq: usize, logits: &[S]) -> Result<(LossBreakdown, Vec<S>)>;
}

/// Construction arguments shared by all objectives.
pub struct ObjectiveArgs<S: Scalar> {
    pub vocab: usize,
    pub kd: KdWeights,
    pub teachers: Vec<Arc<dyn LanguageModel<S>>>,
    pub ensemble: String,
}

impl<S: Scalar> ObjectiveArgs<S> {
    pub fn plain(vocab: usize) -> Self {
        Self {
            vocab,
            kd: KdWeights::default(),
            teachers: Vec::new(),
            ensemble: "logit_mean".into(),
        }
    }
}

/// Next-token cross-entropy, averaged over every scored position.
pub struct CrossEntropy {
    pub vocab: usize,
}

impl<S: Scalar> Objective<S> for CrossEntropy {
    fn name(&self) -> &'static str {
        "ce"
    }

    fn loss(&self, tokens: &[u32], batch: usize, seq: usize, logits: &[S]) -> Result<(LossBreakdown, Vec<S>)> {
        let targets = next_token_targets(tokens, batch, seq);
        let (ce, grad) = cross_entropy(logits, self.vocab, &targets)?;
        Ok((LossBreakdown { total: ce, ce, kl: 0.0 }, grad))
    }
}

pub fn objectives<S: Scalar>() -> Registry<dyn Objective<S>, ObjectiveArgs<S>> {
    let mut r: Registry<dyn Objective<S>, ObjectiveArgs<S>> = Registry::new("objective");
    r.register("ce", |a: &ObjectiveArgs<S>| Ok(Box::new(CrossEntropy { vocab: a.vocab })));
    r.register("kd", |a: &ObjectiveArgs<S>| {
        if a.teachers.is_empty() {
            return Err(Error::config("the kd objective needs at least one teacher"));
        }
        Ok(Box::new(KdObjective::new(a.teachers.clone(), &a.ensemble, a.kd, a.vocab)?))
    });
    r
}
