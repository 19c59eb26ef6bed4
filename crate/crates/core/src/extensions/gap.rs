//! Post-training gradient ascent on the language-modelling loss.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataloader::{chunk_count, chunk_stream, epoch_plan, Split, TokenStream};
use crate::error::{Error, Result};
use crate::model::checkpoint::file_sha256;
use crate::model::{Checkpoint, Model};
use crate::training::{CrossEntropy, Objective, OptimConfig, Optimizer, Sgd};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GapConfig {
    #[serde(default = "default_steps")]
    pub steps: u64,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_chunk_len")]
    pub chunk_len: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_steps() -> u64 {
    50
}
fn default_lr() -> f64 {
    5e-5
}
fn default_batch() -> usize {
    1
}
fn default_chunk_len() -> usize {
    128
}

impl Default for GapConfig {
    fn default() -> Self {
        Self {
            steps: default_steps(),
            lr: default_lr(),
            batch: default_batch(),
            chunk_len: default_chunk_len(),
            seed: 0,
        }
    }
}

impl GapConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=1000).contains(&self.steps) {
            return Err(Error::config(format!("gap.steps must lie in [1, 1000], got {}", self.steps)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.batch == 0 || self.chunk_len < 2 {
            return Err(Error::config("gap.lr must be > 0, gap.batch >= 1 and gap.chunk_len >= 2"));
        }
        Ok(())
    }
}

/// Loss on one visited batch before and after its ascent step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapStep {
    pub step: u64,
    pub loss_before: f64,
    pub loss_after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub input: PathBuf,
    pub input_sha256: String,
    pub output: PathBuf,
    pub config: GapConfig,
    pub trajectory: Vec<GapStep>,
}

/// `config.steps` ascent updates on a model; batches follow the epoch plans
/// of `config.seed`, moving to the next epoch when one runs out.
pub fn gap_ascend(model: &mut Model<f32>, data: &[u32], config: &GapConfig) -> Result<Vec<GapStep>> {
    config.validate()?;
    if config.chunk_len > model.config().max_seq {
        return Err(Error::config("gap.chunk_len exceeds the model's max_seq"));
    }
    let stream = TokenStream::new(data.to_vec(), Split::Train);
    stream.check_vocab(model.config().vocab)?;
    let len = config.chunk_len;
    let chunks = chunk_stream(&stream, len, 0)?;
    if chunks.is_empty() {
        return Err(Error::config("gap data holds no full chunk"));
    }
    let objective = CrossEntropy { vocab: model.config().vocab };
    let mut sgd = Sgd::new(OptimConfig {
        name: "sgd".into(),
        weight_decay: 0.0,
        ..OptimConfig::default()
    });
    let mut trajectory = Vec::with_capacity(config.steps as usize);
    let mut batches = Vec::new();
    let mut epoch = 0u64;
    for step in 1..=config.steps {
        if batches.is_empty() {
            let plan = epoch_plan(|off| chunk_count(stream.ids.len(), len, off), len, epoch, config.seed, false);
            batches = plan.permutation.chunks(config.batch).rev().map(<[usize]>::to_vec).collect();
            epoch += 1;
        }
        let idx = batches.pop().unwrap();
        let tokens: Vec<u32> = idx.iter().flat_map(|&i| chunks[i].ids.iter().copied()).collect();
        let (lb, _, mut grads) = model.loss_and_grads(&tokens, idx.len(), len, |l| objective.loss(&tokens, idx.len(), len, l))?;
        if !lb.total.is_finite() {
            return Err(Error::Divergence { step, loss: lb.total });
        }
        grads.iter_mut().flatten().for_each(|g| *g = -*g);
        Optimizer::<f32>::step(&mut sgd, model.params_mut(), &grads, config.lr)?;
        let after = model.loss_and_grads(&tokens, idx.len(), len, |l| objective.loss(&tokens, idx.len(), len, l))?.0;
        if !after.total.is_finite() || !model.params().is_finite() {
            return Err(Error::Divergence { step, loss: after.total });
        }
        trajectory.push(GapStep {
            step,
            loss_before: lb.total,
            loss_after: after.total,
        });
    }
    Ok(trajectory)
}

/// Runs ascent on the checkpoint at `input` and writes a new checkpoint to
/// `output`. The input file is only read; `output` must differ from it.
pub fn gap_posttrain(input: &Path, data: &[u32], config: &GapConfig, output: &Path) -> Result<GapReport> {
    config.validate()?;
    if output == input || (output.exists() && output.canonicalize().ok() == input.canonicalize().ok()) {
        return Err(Error::config("gap output must not overwrite the input checkpoint"));
    }
    let input_sha256 = file_sha256(input)?;
    let ck = Checkpoint::load(input)?;
    let mut model: Model<f32> = ck.to_model()?;
    let trajectory = gap_ascend(&mut model, data, config)?;
    let mut metadata = ck.metadata.clone();
    if !metadata.is_object() {
        metadata = serde_json::json!({});
    }
    metadata["gap"] = serde_json::json!({"config": config, "source_sha256": input_sha256, "trajectory": trajectory});
    Checkpoint::from_model(&model, metadata).save(output)?;
    Ok(GapReport {
        input: input.to_path_buf(),
        input_sha256,
        output: output.to_path_buf(),
        config: *config,
        trajectory,
    })
}
