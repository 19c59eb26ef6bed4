//! Ensemble-teacher knowledge distillation.

pub mod loss;

use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Checkpoint, LanguageModel, Model, ModelConfig};
use crate::registry::Registry;
use crate::tensor::Scalar;
use crate::training::{run_training, CrossEntropy, Objective, RunOutput, TrainConfig, TrainOutcome, TrainingData};

pub use loss::*;

/// How member predictions are combined into one distribution.
pub trait EnsembleStrategy<S: Scalar>: Send + Sync {
    fn name(&self) -> &'static str;
    /// Combined logits at temperature 1.
    fn combine_logits(&self, members: &[Vec<S>], vocab: usize) -> Result<Vec<S>>;
    /// Combined soft targets at `temperature`.
    fn soft_targets(&self, members: &[Vec<S>], vocab: usize, temperature: f64) -> Result<SoftTargets<S>>;
}

/// Average the logits, then soften.
struct LogitMean;

/// Soften each member, then average the probabilities.
struct ProbMean;

impl<S: Scalar> EnsembleStrategy<S> for LogitMean {
    fn name(&self) -> &'static str {
        "logit_mean"
    }

    fn combine_logits(&self, members: &[Vec<S>], _vocab: usize) -> Result<Vec<S>> {
        ensemble_logits(members)
    }

    fn soft_targets(&self, members: &[Vec<S>], vocab: usize, temperature: f64) -> Result<SoftTargets<S>> {
        temperature_softmax(&ensemble_logits(members)?, vocab, temperature)
    }
}

impl ProbMean {
    fn mean_probs<S: Scalar>(members: &[Vec<S>], vocab: usize, temperature: f64) -> Result<Vec<S>> {
        let softened = members
            .iter()
            .map(|m| temperature_softmax(m, vocab, temperature).map(|s| s.probs))
            .collect::<Result<Vec<_>>>()?;
        ensemble_logits(&softened)
    }
}

impl<S: Scalar> EnsembleStrategy<S> for ProbMean {
    fn name(&self) -> &'static str {
        "prob_mean"
    }

    fn combine_logits(&self, members: &[Vec<S>], vocab: usize) -> Result<Vec<S>> {
        Ok(Self::mean_probs(members, vocab, 1.0)?.into_iter().map(|p| p.ln()).collect())
    }

    fn soft_targets(&self, members: &[Vec<S>], vocab: usize, temperature: f64) -> Result<SoftTargets<S>> {
        let mut probs = Self::mean_probs(members, vocab, temperature)?;
        // Renormalize away the rounding of the average.
        for row in probs.chunks_exact_mut(vocab) {
            let total: S = row.iter().copied().sum();
            row.iter_mut().for_each(|p| *p /= total);
        }
        Ok(SoftTargets { probs, vocab })
    }
}

pub fn ensemble_strategies<S: Scalar>() -> Registry<dyn EnsembleStrategy<S>> {
    let mut r: Registry<dyn EnsembleStrategy<S>> = Registry::new("ensemble strategy");
    r.register("logit_mean", |_| Ok(Box::new(LogitMean)));
    r.register("prob_mean", |_| Ok(Box::new(ProbMean)));
    r
}

/// Several models treated as one.
pub struct Ensemble<S: Scalar> {
    members: Vec<Arc<dyn LanguageModel<S>>>,
    strategy: Box<dyn EnsembleStrategy<S>>,
}

impl<S: Scalar> Ensemble<S> {
    pub fn new(members: Vec<Arc<dyn LanguageModel<S>>>, strategy: &str) -> Result<Self> {
        let first = members.first().ok_or_else(|| Error::config("an ensemble needs at least one member"))?;
        if let Some(m) = members.iter().find(|m| m.vocab_size() != first.vocab_size()) {
            return Err(Error::config(format!(
                "ensemble members disagree on vocabulary size ({} vs {})",
                first.vocab_size(),
                m.vocab_size()
            )));
        }
        Ok(Self {
            strategy: ensemble_strategies::<S>().create(strategy, &())?,
            members,
        })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Every member's logits; members run on separate threads.
    pub fn member_logits(&self, tokens: &[u32], batch: usize, seq: usize) -> Result<Vec<Vec<S>>> {
        if self.members.len() == 1 {
            return Ok(vec![self.members[0].logits(tokens, batch, seq)?]);
        }
        std::thread::scope(|scope| {
            let handles: Vec<_> = self
                .members
                .iter()
                .map(|m| scope.spawn(move || m.logits(tokens, batch, seq)))
                .collect();
            handles.into_iter().map(|h| h.join().expect("teacher thread panicked")).collect()
        })
    }

    pub fn soft_targets(&self, tokens: &[u32], batch: usize, seq: usize, temperature: f64) -> Result<SoftTargets<S>> {
        let logits = self.member_logits(tokens, batch, seq)?;
        self.strategy.soft_targets(&logits, self.vocab_size(), temperature)
    }
}

impl<S: Scalar> LanguageModel<S> for Ensemble<S> {
    fn vocab_size(&self) -> usize {
        self.members[0].vocab_size()
    }

    fn max_seq(&self) -> usize {
        self.members.iter().map(|m| m.max_seq()).min().unwrap_or(0)
    }

    fn logits(&self, tokens: &[u32], batch: usize, seq: usize) -> Result<Vec<S>> {
        let logits = self.member_logits(tokens, batch, seq)?;
        self.strategy.combine_logits(&logits, self.vocab_size())
    }
}

/// The hybrid loss against fresh ensemble soft targets. With `alpha == 1`
/// the teachers are never run.
pub struct KdObjective<S: Scalar> {
    teachers: Ensemble<S>,
    weights: KdWeights,
    vocab: usize,
}

impl<S: Scalar> KdObjective<S> {
    pub fn new(teachers: Vec<Arc<dyn LanguageModel<S>>>, strategy: &str, weights: KdWeights, vocab: usize) -> Result<Self> {
        weights.validate()?;
        let teachers = Ensemble::new(teachers, strategy)?;
        if teachers.vocab_size() != vocab {
            return Err(Error::config(format!(
                "teacher vocabulary {} differs from student vocabulary {vocab}",
                teachers.vocab_size()
            )));
        }
        Ok(Self { teachers, weights, vocab })
    }
}

impl<S: Scalar> Objective<S> for KdObjective<S> {
    fn name(&self) -> &'static str {
        "kd"
    }

    fn loss(&self, tokens: &[u32], batch: usize, seq: usize, logits: &[S]) -> Result<(LossBreakdown, Vec<S>)> {
        if self.weights.alpha == 1.0 {
            return CrossEntropy { vocab: self.vocab }.loss(tokens, batch, seq, logits);
        }
        let soft = self.teachers.soft_targets(tokens, batch, seq, self.weights.temperature)?;
        kd_loss(logits, &soft, &next_token_targets(tokens, batch, seq), &self.weights)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_true")]
    pub scale_kl_by_t2: bool,
    #[serde(default)]
    pub teachers: Vec<PathBuf>,
    #[serde(default = "default_ensemble")]
    pub ensemble: String,
}

fn default_alpha() -> f64 {
    KdWeights::default().alpha
}
fn default_temperature() -> f64 {
    KdWeights::default().temperature
}
fn default_true() -> bool {
    true
}
fn default_ensemble() -> String {
    "logit_mean".into()
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            alpha: default_alpha(),
            temperature: default_temperature(),
            scale_kl_by_t2: true,
            teachers: Vec::new(),
            ensemble: default_ensemble(),
        }
    }
}

impl DistillConfig {
    pub fn weights(&self) -> KdWeights {
        KdWeights {
            alpha: self.alpha,
            temperature: self.temperature,
            scale_kl_by_t2: self.scale_kl_by_t2,
        }
    }
}

/// Loads every teacher and checks it against the student before any
/// training work happens.
pub fn load_teachers(config: &DistillConfig, student: &ModelConfig, chunk_len: usize) -> Result<Vec<Arc<dyn LanguageModel<f32>>>> {
    config.weights().validate()?;
    if config.teachers.is_empty() {
        return Err(Error::config("distillation needs at least one teacher checkpoint"));
    }
    if let Some(missing) = config.teachers.iter().find(|p| !p.is_file()) {
        return Err(Error::config(format!("teacher checkpoint {} does not exist", missing.display())));
    }
    let mut teachers: Vec<Arc<dyn LanguageModel<f32>>> = Vec::with_capacity(config.teachers.len());
    for path in &config.teachers {
        let model: Model<f32> = Checkpoint::load(path)?.to_model()?;
        if model.config().vocab != student.vocab {
            return Err(Error::config(format!(
                "teacher {} has vocabulary {} but the student has {}",
                path.display(),
                model.config().vocab,
                student.vocab
            )));
        }
        if model.config().max_seq < chunk_len {
            return Err(Error::config(format!(
                "teacher {} has max_seq {} below chunk_len {chunk_len}",
                path.display(),
                model.config().max_seq
            )));
        }
        teachers.push(Arc::new(model));
    }
    Ok(teachers)
}

/// Trains a freshly initialized student on the hybrid loss from step zero.
pub fn distill_train(student: &ModelConfig, distill: &DistillConfig, config: &TrainConfig, data: &TrainingData, out: &RunOutput) -> Result<TrainOutcome> {
    let teachers = load_teachers(distill, student, config.chunk_len)?;
    let objective = KdObjective::new(teachers, &distill.ensemble, distill.weights(), student.vocab)?;
    let model = Model::init(student.clone(), config.seed)?;
    run_training(model, config, data, &objective, out, "distill")
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Fixed(Vec<f64>, usize);

    impl LanguageModel<f64> for Fixed {
        fn vocab_size(&self) -> usize {
            self.1
        }
        fn max_seq(&self) -> usize {
            8
        }
        fn logits(&self, _tokens: &[u32], batch: usize, seq: usize) -> Result<Vec<f64>> {
            Ok(self.0.iter().copied().cycle().take(batch * seq * self.1).collect())
        }
    }

    #[test]
    fn strategies_agree_on_identical_members() {
        let m: Arc<dyn LanguageModel<f64>> = Arc::new(Fixed(vec![0.3, -1.0, 2.0], 3));
        for name in ["logit_mean", "prob_mean"] {
            let e = Ensemble::new(vec![m.clone(), m.clone(), m.clone()], name).unwrap();
            let single = temperature_softmax(&m.logits(&[0, 1], 1, 2).unwrap(), 3, 2.0).unwrap();
            let soft = e.soft_targets(&[0, 1], 1, 2, 2.0).unwrap();
            for (a, b) in soft.probs.iter().zip(&single.probs) {
                assert!((a - b).abs() < 1e-15, "{name}");
            }
        }
        let e = Ensemble::new(vec![m.clone(), m.clone()], "logit_mean").unwrap();
        assert_eq!(e.logits(&[0, 1], 1, 2).unwrap(), m.logits(&[0, 1], 1, 2).unwrap());
        assert!(Ensemble::<f64>::new(vec![], "logit_mean").is_err());
        assert!(Ensemble::new(vec![m], "median").is_err());
    }

    #[test]
    fn kd_objective_checks_vocab_and_alpha() {
        let m: Arc<dyn LanguageModel<f64>> = Arc::new(Fixed(vec![0.0, 1.0], 2));
        assert!(KdObjective::new(vec![m.clone()], "logit_mean", KdWeights::default(), 3).is_err());
        let w = KdWeights {
            alpha: 1.5,
            ..KdWeights::default()
        };
        assert!(KdObjective::new(vec![m], "logit_mean", w, 2).is_err());
    }
}
