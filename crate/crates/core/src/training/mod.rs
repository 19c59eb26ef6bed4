//! Causal-LM training: optimizer, schedule, epoch loop, dev evaluation and
//! checkpointing. Distillation reuses the same loop with another objective.

pub mod objective;
pub mod optim;
pub mod schedule;

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::corpus::{curriculum_active_sources, CurriculumPlan, SourceKind};
use crate::dataloader::{chunk_count, chunk_stream, epoch_plan, fixed_dev_subset, Chunk, Split, TokenStream, DEFAULT_DEV_CHUNKS};
use crate::error::{Error, Result};
use crate::extensions::sam::{sam_step, SamConfig};
use crate::model::checkpoint::write_atomic;
use crate::model::{Checkpoint, LanguageModel, Model, ModelConfig};
use crate::tensor::{log_sum_exp, Scalar, Tensor};

pub use objective::{objectives, CrossEntropy, Objective, ObjectiveArgs};
pub use optim::{clip_grad_norm, global_norm, optimizers, AdamW, OptimConfig, Optimizer, OptimizerState, Sgd};
pub use schedule::{lr_at, ScheduleConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: u64,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_chunk_len")]
    pub chunk_len: usize,
    /// Random per-epoch offset into the token stream.
    #[serde(default)]
    pub use_offset: bool,
    #[serde(default = "default_dev_chunks")]
    pub dev_chunks: usize,
    #[serde(default = "default_eval_batch")]
    pub eval_batch: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    /// When set, `sam.applied_epochs` extra epochs follow the regular ones.
    #[serde(default)]
    pub sam: Option<SamConfig>,
}

fn default_epochs() -> u64 {
    1
}
fn default_batch() -> usize {
    32
}
fn default_chunk_len() -> usize {
    128
}
fn default_dev_chunks() -> usize {
    DEFAULT_DEV_CHUNKS
}
fn default_eval_batch() -> usize {
    16
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_value(json!({})).expect("all fields have defaults")
    }
}

impl TrainConfig {
    pub fn total_epochs(&self) -> u64 {
        self.epochs + self.sam.map_or(0, |s| s.applied_epochs)
    }

    /// SAM radius for `epoch`, if that epoch is a SAM epoch.
    pub fn sam_rho(&self, epoch: u64) -> Option<f64> {
        self.sam.filter(|_| epoch >= self.epochs).map(|s| s.rho)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.eval_batch == 0 {
            return Err(Error::config("batch and eval_batch must be >= 1"));
        }
        if self.chunk_len < 2 {
            return Err(Error::config("chunk_len must be >= 2"));
        }
        if let Some(s) = &self.sam {
            s.validate()?;
        }
        self.optim.validate()
    }
}

/// Training tokens per source plus the dev stream.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingData {
    pub train: Vec<(SourceKind, Vec<u32>)>,
    pub dev: Vec<u32>,
    pub curriculum: Option<CurriculumPlan>,
}

impl TrainingData {
    pub fn single(train: Vec<u32>, dev: Vec<u32>) -> Self {
        Self {
            train: vec![(SourceKind::Other("train".into()), train)],
            dev,
            curriculum: None,
        }
    }

    /// Concatenation of the sources active in `epoch`, in declaration order.
    pub fn epoch_stream(&self, epoch: u64) -> TokenStream {
        let active = self.curriculum.as_ref().map(|p| curriculum_active_sources(p, epoch));
        let ids = self
            .train
            .iter()
            .filter(|(k, _)| active.as_ref().is_none_or(|a| a.contains(k)))
            .flat_map(|(_, ids)| ids.iter().copied())
            .collect();
        TokenStream::new(ids, Split::Train)
    }

    pub fn validate(&self, vocab: usize) -> Result<()> {
        for (_, ids) in &self.train {
            TokenStream::new(ids.clone(), Split::Train).check_vocab(vocab)?;
        }
        TokenStream::new(self.dev.clone(), Split::Dev).check_vocab(vocab)?;
        if let Some(plan) = &self.curriculum {
            for (k, _) in &self.train {
                if !plan.buckets.iter().any(|b| b.contains(k)) {
                    return Err(Error::config(format!("source {k} is not covered by the curriculum")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: u64,
    /// Number of completed epochs.
    pub epoch: u64,
    pub seed: u64,
    pub best_dev_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub loss: f64,
    pub ce: f64,
    pub kl: f64,
    pub aux: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: u64,
    pub steps: u64,
    pub offset: usize,
    pub chunks: usize,
    pub sam: bool,
    pub first_train_loss: f64,
    pub last_train_loss: f64,
    pub mean_train_loss: f64,
    pub dev_loss: Option<f64>,
}

/// Model, optimizer and counters for one training run.
pub struct Trainer<S: Scalar> {
    model: Model<S>,
    optimizer: Box<dyn Optimizer<S>>,
    config: TrainConfig,
    schedule: ScheduleConfig,
    state: TrainState,
    history: Vec<EpochSummary>,
}

/// Steps needed for all epochs, counting offset-free chunks.
pub fn planned_steps(config: &TrainConfig, data: &TrainingData) -> u64 {
    (0..config.total_epochs())
        .map(|e| chunk_count(data.epoch_stream(e).ids.len(), config.chunk_len, 0).div_ceil(config.batch) as u64)
        .sum()
}

impl<S: Scalar> Trainer<S> {
    pub fn new(model: Model<S>, config: TrainConfig, data: &TrainingData) -> Result<Self> {
        config.validate()?;
        if config.chunk_len > model.config().max_seq {
            return Err(Error::config(format!(
                "chunk_len {} exceeds the model's max_seq {}",
                config.chunk_len,
                model.config().max_seq
            )));
        }
        data.validate(model.config().vocab)?;
        let mut schedule = config.schedule.clone();
        if schedule.total_steps == 0 {
            schedule.total_steps = planned_steps(&config, data);
        }
        schedule.validate(config.optim.max_lr)?;
        let optimizer = optimizers::<S>().create(&config.optim.name, &config.optim)?;
        let state = TrainState {
            step: 0,
            epoch: 0,
            seed: config.seed,
            best_dev_loss: None,
        };
        Ok(Self {
            model,
            optimizer,
            config,
            schedule,
            state,
            history: Vec::new(),
        })
    }

    /// Restores weights, optimizer moments, counters and history.
    pub fn from_checkpoint(ck: &Checkpoint, config: TrainConfig, data: &TrainingData) -> Result<Self> {
        let mut t = Self::new(ck.to_model()?, config, data)?;
        let meta = &ck.metadata;
        let bad = |d: &str| Error::Format {
            what: "checkpoint",
            detail: d.to_string(),
        };
        t.state = serde_json::from_value(meta.get("train_state").cloned().ok_or_else(|| bad("missing train_state"))?)?;
        if t.state.seed != t.config.seed {
            return Err(Error::config(format!(
                "resume seed {} differs from the checkpoint's seed {}",
                t.config.seed, t.state.seed
            )));
        }
        t.history = serde_json::from_value(meta.get("history").cloned().unwrap_or(json!([])))?;
        let name = meta.pointer("/optimizer/name").and_then(|v| v.as_str()).unwrap_or_default();
        if name != t.optimizer.name() {
            return Err(Error::config(format!("checkpoint optimizer {name:?} differs from configured {:?}", t.optimizer.name())));
        }
        let steps = meta.pointer("/optimizer/steps").and_then(|v| v.as_u64()).unwrap_or(0);
        let tensors = ck
            .tensors
            .iter()
            .filter_map(|(n, tensor)| n.strip_prefix("optim.").map(|n| (n.to_string(), tensor.cast::<S>())))
            .collect();
        let params = t.model.params().clone();
        t.optimizer.import_state(&params, OptimizerState { steps, tensors })?;
        Ok(t)
    }

    pub fn model(&self) -> &Model<S> {
        &self.model
    }

    pub fn into_model(self) -> Model<S> {
        self.model
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn history(&self) -> &[EpochSummary] {
        &self.history
    }

    pub fn schedule(&self) -> &ScheduleConfig {
        &self.schedule
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Weights plus optimizer state and counters, ready to resume from.
    pub fn checkpoint(&self, kind: &str) -> Checkpoint {
        let mut metadata = json!({
            "kind": kind,
            "train_state": self.state,
            "optimizer": {"name": self.optimizer.name(), "steps": self.optimizer.steps()},
            "schedule": self.schedule,
            "train_config": self.config,
            "history": self.history,
        });
        if let Some(best) = self.state.best_dev_loss {
            metadata["dev_loss"] = json!(best);
        }
        let mut ck = Checkpoint::from_model(&self.model, metadata);
        let state = self.optimizer.export_state(self.model.params());
        ck.tensors.extend(state.tensors.into_iter().map(|(n, t)| (format!("optim.{n}"), t.cast::<f32>())));
        ck
    }

    /// One update on a `[batch, seq]` block; `sam_rho` switches to SAM.
    pub fn step(&mut self, tokens: &[u32], batch: usize, seq: usize, objective: &dyn Objective<S>, sam_rho: Option<f64>) -> Result<StepRecord> {
        let step = self.state.step + 1;
        let lr = lr_at(&self.schedule, self.config.optim.max_lr, step);
        let clip = self.config.optim.grad_clip;
        let model = &self.model;
        let loss_fn = |p: &crate::model::ParamStore<S>| {
            let (lb, aux, grads) = model.loss_and_grads_with(p, tokens, batch, seq, |logits| objective.loss(tokens, batch, seq, logits))?;
            let value = lb.total + aux;
            if !value.is_finite() {
                return Err(Error::Divergence { step, loss: value });
            }
            Ok(((lb, aux), grads))
        };
        let ((lb, aux), grad_norm) = match sam_rho {
            None => {
                let ((lb, aux), mut grads) = loss_fn(model.params())?;
                let norm = match clip {
                    Some(c) => clip_grad_norm(&mut grads, c),
                    None => global_norm(&grads),
                };
                if !norm.is_finite() {
                    return Err(Error::Divergence { step, loss: lb.total + aux });
                }
                self.optimizer.step(self.model.params_mut(), &grads, lr)?;
                ((lb, aux), norm)
            }
            Some(rho) => {
                let mut params = model.params().clone();
                let (value, outcome) = sam_step(&mut params, loss_fn, self.optimizer.as_mut(), rho, lr, clip)?;
                if !outcome.grad_norm.is_finite() {
                    return Err(Error::Divergence { step, loss: value.0.total });
                }
                *self.model.params_mut() = params;
                (value, outcome.grad_norm)
            }
        };
        if !self.model.params().is_finite() {
            return Err(Error::Divergence { step, loss: lb.total + aux });
        }
        self.state.step = step;
        Ok(StepRecord {
            step,
            epoch: self.state.epoch,
            lr,
            loss: lb.total + aux,
            ce: lb.ce,
            kl: lb.kl,
            aux,
            grad_norm,
        })
    }

    /// Trains over one epoch plan; `on_step` sees every step record.
    pub fn train_epoch(&mut self, data: &TrainingData, objective: &dyn Objective<S>, sam_rho: Option<f64>, on_step: &mut dyn FnMut(&StepRecord) -> Result<()>) -> Result<EpochSummary> {
        let epoch = self.state.epoch;
        let len = self.config.chunk_len;
        let stream = data.epoch_stream(epoch);
        let plan = epoch_plan(|off| chunk_count(stream.ids.len(), len, off), len, epoch, self.config.seed, self.config.use_offset);
        let chunks = chunk_stream(&stream, len, plan.offset)?;
        if chunks.is_empty() {
            return Err(Error::config(format!("epoch {epoch} has no full chunk of {len} tokens")));
        }
        let mut losses = Vec::with_capacity(chunks.len().div_ceil(self.config.batch));
        for idx in plan.permutation.chunks(self.config.batch) {
            let tokens: Vec<u32> = idx.iter().flat_map(|&i| chunks[i].ids.iter().copied()).collect();
            let rec = self.step(&tokens, idx.len(), len, objective, sam_rho)?;
            on_step(&rec)?;
            losses.push(rec.loss);
        }
        self.state.epoch += 1;
        let summary = EpochSummary {
            epoch,
            steps: losses.len() as u64,
            offset: plan.offset,
            chunks: chunks.len(),
            sam: sam_rho.is_some(),
            first_train_loss: losses[0],
            last_train_loss: *losses.last().unwrap(),
            mean_train_loss: losses.iter().sum::<f64>() / losses.len() as f64,
            dev_loss: None,
        };
        self.history.push(summary.clone());
        Ok(summary)
    }

    /// Records the dev loss of the most recent epoch.
    pub fn record_dev_loss(&mut self, loss: f64) {
        if let Some(last) = self.history.last_mut() {
            last.dev_loss = Some(loss);
        }
        if self.state.best_dev_loss.is_none_or(|b| loss < b) {
            self.state.best_dev_loss = Some(loss);
        }
    }
}

/// Per-position next-token losses `-ln p(target)` of one block, in `f64`.
pub fn token_losses<S: Scalar>(model: &dyn LanguageModel<S>, tokens: &[u32], batch: usize, seq: usize) -> Result<Vec<f64>> {
    let vocab = model.vocab_size();
    let logits = model.logits(tokens, batch, seq)?;
    let mut out = Vec::with_capacity(batch * (seq - 1));
    for b in 0..batch {
        for t in 0..seq - 1 {
            let row: Vec<f64> = logits[(b * seq + t) * vocab..(b * seq + t + 1) * vocab].iter().map(|v| v.f64()).collect();
            let target = tokens[b * seq + t + 1] as usize;
            out.push(log_sum_exp(&row) - row[target]);
        }
    }
    Ok(out)
}

/// Mean of `values`, independent of their order and exact when all agree.
pub fn stable_mean(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let base = values[0];
    base + values.iter().map(|v| v - base).sum::<f64>() / values.len() as f64
}

/// Mean per-token cross-entropy (nats) over `chunks`.
pub fn evaluate_loss<S: Scalar>(model: &dyn LanguageModel<S>, chunks: &[Chunk], eval_batch: usize) -> Result<f64> {
    if chunks.is_empty() {
        return Err(Error::config("cannot evaluate on an empty dev set"));
    }
    let seq = chunks[0].ids.len();
    if seq < 2 || chunks.iter().any(|c| c.ids.len() != seq) {
        return Err(Error::Shape("dev chunks must share one length >= 2".into()));
    }
    let mut losses = Vec::with_capacity(chunks.len() * (seq - 1));
    for group in chunks.chunks(eval_batch.max(1)) {
        let tokens: Vec<u32> = group.iter().flat_map(|c| c.ids.iter().copied()).collect();
        losses.extend(token_losses(model, &tokens, group.len(), seq)?);
    }
    Ok(stable_mean(&mut losses))
}

/// Where a run writes checkpoints and metrics, and what it resumes from.
#[derive(Debug, Clone, Default)]
pub struct RunOutput {
    pub dir: Option<PathBuf>,
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochSummary>,
    pub final_path: Option<PathBuf>,
}

pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const METRICS_FILE: &str = "metrics.jsonl";

pub fn epoch_checkpoint_name(epoch: u64) -> String {
    format!("epoch-{epoch:03}.ckpt")
}

fn append_jsonl(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    writeln!(f, "{value}").map_err(|e| Error::io(path, e))
}

/// Drops logged records past `step`, so a rerun or resume never
/// duplicates lines.
fn truncate_metrics(path: &Path, step: u64) -> Result<()> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(Error::io(path, e)),
    };
    let record_step = |line: &str| -> Option<u64> {
        let v: serde_json::Value = serde_json::from_str(line).ok()?;
        v.get("step").or_else(|| v.get("record")?.get("step"))?.as_u64()
    };
    let kept: String = text
        .lines()
        .filter(|l| record_step(l).is_some_and(|s| s <= step))
        .map(|l| format!("{l}\n"))
        .collect();
    write_atomic(path, kept.as_bytes())
}

/// The shared epoch loop: trains, evaluates dev loss after every epoch,
/// checkpoints each epoch and at the end, and logs JSON lines.
pub fn run_training(model: Model<f32>, config: &TrainConfig, data: &TrainingData, objective: &dyn Objective<f32>, out: &RunOutput, kind: &str) -> Result<TrainOutcome> {
    let mut trainer = match &out.resume {
        Some(path) => Trainer::from_checkpoint(&Checkpoint::load(path)?, config.clone(), data)?,
        None => Trainer::new(model, config.clone(), data)?,
    };
    let dev_stream = TokenStream::new(data.dev.clone(), Split::Dev);
    let available = chunk_count(dev_stream.ids.len(), config.chunk_len, 0);
    if available == 0 {
        return Err(Error::config(format!("the dev split has no full chunk of {} tokens", config.chunk_len)));
    }
    let n_dev = config.dev_chunks.min(available);
    if n_dev < config.dev_chunks {
        log::warn!("dev split holds {available} chunks; evaluating on all of them instead of {}", config.dev_chunks);
    }
    let dev = fixed_dev_subset(&dev_stream, config.chunk_len, n_dev, config.seed)?;
    let metrics = match &out.dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(METRICS_FILE);
            truncate_metrics(&path, trainer.state().step)?;
            Some(path)
        }
        None => None,
    };
    while trainer.state().epoch < config.total_epochs() {
        let epoch = trainer.state().epoch;
        let rho = config.sam_rho(epoch);
        let mut log_step = |r: &StepRecord| match &metrics {
            Some(p) => append_jsonl(p, &json!({"kind": "step", "record": r})),
            None => Ok(()),
        };
        let summary = trainer.train_epoch(data, objective, rho, &mut log_step)?;
        let dev_loss = evaluate_loss(trainer.model(), &dev, config.eval_batch)?;
        trainer.record_dev_loss(dev_loss);
        log::info!(
            "{kind} epoch {epoch}: {} steps, train loss {:.4} -> {:.4}, dev loss {dev_loss:.4}",
            summary.steps,
            summary.first_train_loss,
            summary.last_train_loss
        );
        if let (Some(p), Some(dir)) = (&metrics, &out.dir) {
            append_jsonl(p, &json!({"kind": "epoch", "epoch": epoch, "step": trainer.state().step, "dev_loss": dev_loss, "summary": summary}))?;
            trainer.checkpoint(kind).save(&dir.join(epoch_checkpoint_name(epoch)))?;
        }
    }
    let checkpoint = trainer.checkpoint(kind);
    let final_path = match &out.dir {
        Some(dir) => {
            let p = dir.join(FINAL_CHECKPOINT);
            checkpoint.save(&p)?;
            Some(p)
        }
        None => None,
    };
    Ok(TrainOutcome {
        checkpoint,
        history: trainer.history().to_vec(),
        final_path,
    })
}

/// Plain next-token pretraining from a seeded initialization.
pub fn pretrain(model_config: &ModelConfig, config: &TrainConfig, data: &TrainingData, out: &RunOutput) -> Result<TrainOutcome> {
    let model = Model::init(model_config.clone(), config.seed)?;
    let objective = CrossEntropy { vocab: model_config.vocab };
    run_training(model, config, data, &objective, out, "pretrain")
}

/// Strips optimizer state, leaving a weights-only checkpoint.
pub fn weights_only(ck: &Checkpoint) -> Checkpoint {
    Checkpoint {
        config: ck.config.clone(),
        metadata: ck.metadata.clone(),
        tensors: ck.tensors.iter().filter(|(n, _)| !n.starts_with("optim.")).cloned().collect::<Vec<(String, Tensor<f32>)>>(),
    }
}
