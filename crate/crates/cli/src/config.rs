//! Run configuration: defaults, file, and `--set` overrides merged into one
//! JSON tree, then frozen into typed settings.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use kdlm_core::corpus::DEFAULT_EPOCHS_PER_STAGE;
use kdlm_core::distillation::DistillConfig;
use kdlm_core::evaluation::ScoreOptions;
use kdlm_core::extensions::gap::GapConfig;
use kdlm_core::model::ModelConfig;
use kdlm_core::tokenizer::BpeConfig;
use kdlm_core::training::{OptimConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::UsageError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Raw training files; `None` means generate a synthetic corpus.
    pub train_dir: Option<PathBuf>,
    pub dev_dir: Option<PathBuf>,
    /// Tab-separated minimal pairs.
    pub pairs: Option<PathBuf>,
    pub synthetic_sentences: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_dir: None,
            dev_dir: None,
            pairs: None,
            synthetic_sentences: 4000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenizerSettings {
    pub vocab_size: usize,
    pub min_frequency: u64,
}

impl Default for TokenizerSettings {
    fn default() -> Self {
        let d = BpeConfig::default();
        Self {
            vocab_size: d.target_vocab,
            min_frequency: d.min_frequency,
        }
    }
}

impl TokenizerSettings {
    pub fn bpe(&self) -> BpeConfig {
        BpeConfig {
            target_vocab: self.vocab_size,
            min_frequency: self.min_frequency,
        }
    }
}

/// A preset architecture plus field overrides. The vocabulary always
/// comes from the trained tokenizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub preset: String,
    #[serde(default)]
    pub overrides: Map<String, Value>,
}

impl ModelSpec {
    pub fn preset(name: &str) -> Self {
        Self {
            preset: name.into(),
            overrides: Map::new(),
        }
    }

    pub fn resolve(&self, vocab: usize) -> kdlm_core::Result<ModelConfig> {
        let mut tree = serde_json::to_value(ModelConfig::preset(&self.preset)?)?;
        for (k, v) in &self.overrides {
            tree[k] = v.clone();
        }
        tree["vocab"] = vocab.into();
        let cfg: ModelConfig = serde_json::from_value(tree)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherSpec {
    pub name: String,
    pub model: ModelSpec,
    #[serde(default)]
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudentSpec {
    pub model: ModelSpec,
    #[serde(default)]
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurriculumSettings {
    pub enabled: bool,
    pub epochs_per_stage: u64,
}

impl Default for CurriculumSettings {
    fn default() -> Self {
        Self {
            enabled: false,
            epochs_per_stage: DEFAULT_EPOCHS_PER_STAGE,
        }
    }
}

pub const STAGES: &[&str] = &["clean", "tokenize", "teachers", "distill", "ce_only", "eval"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineSettings {
    pub stages: Vec<String>,
}

impl Default for PipelineSettings {
    fn default() -> Self {
        Self {
            stages: STAGES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub tokenizer: TokenizerSettings,
    pub teachers: Vec<TeacherSpec>,
    pub student: StudentSpec,
    pub distill: DistillConfig,
    pub eval: ScoreOptions,
    pub curriculum: CurriculumSettings,
    pub gap: GapConfig,
    pub pipeline: PipelineSettings,
}

fn train(epochs: u64, batch: usize, max_lr: f64) -> TrainConfig {
    TrainConfig {
        epochs,
        batch,
        optim: OptimConfig {
            max_lr,
            ..OptimConfig::default()
        },
        ..TrainConfig::default()
    }
}

impl Default for RunConfig {
    /// The full-scale recipe: two teachers and a 58M student.
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            tokenizer: TokenizerSettings::default(),
            teachers: vec![
                TeacherSpec {
                    name: "teacher_a".into(),
                    model: ModelSpec::preset("gpt2_teacher_705m"),
                    train: train(6, 256, 2.5e-4),
                },
                TeacherSpec {
                    name: "teacher_b".into(),
                    model: ModelSpec::preset("llama_teacher_360m"),
                    train: train(4, 128, 3e-4),
                },
            ],
            student: StudentSpec {
                model: ModelSpec::preset("student_58m"),
                train: train(6, 32, 3e-4),
            },
            distill: DistillConfig::default(),
            eval: ScoreOptions::default(),
            curriculum: CurriculumSettings::default(),
            gap: GapConfig::default(),
            pipeline: PipelineSettings::default(),
        }
    }
}

impl RunConfig {
    /// Propagates the top-level seed into every stage and checks
    /// cross-field constraints.
    fn finish(mut self) -> Result<Self, UsageError> {
        for t in &mut self.teachers {
            t.train.seed = self.seed;
        }
        self.student.train.seed = self.seed;
        self.gap.seed = self.seed;
        let err = |m: String| Err(UsageError(m));
        if self.teachers.is_empty() {
            return err("teachers: at least one teacher is required".into());
        }
        let mut names = BTreeSet::new();
        for t in &self.teachers {
            if t.name.is_empty() || t.name.contains(['/', '\\']) || !names.insert(t.name.as_str()) {
                return err(format!("teachers: names must be unique path-safe strings, got {:?}", t.name));
            }
            if ["student", "ensemble", "distilled", "ce_only"].contains(&t.name.as_str()) {
                return err(format!("teachers: {:?} is reserved", t.name));
            }
            t.train.validate().map_err(|e| UsageError(format!("teachers.{}.train: {e}", t.name)))?;
            t.model.resolve(1000).map_err(|e| UsageError(format!("teachers.{}.model: {e}", t.name)))?;
        }
        self.student.train.validate().map_err(|e| UsageError(format!("student.train: {e}")))?;
        self.student.model.resolve(1000).map_err(|e| UsageError(format!("student.model: {e}")))?;
        self.distill.weights().validate().map_err(|e| UsageError(format!("distill: {e}")))?;
        self.gap.validate().map_err(|e| UsageError(format!("gap: {e}")))?;
        if self.tokenizer.vocab_size <= kdlm_core::tokenizer::BASE_VOCAB {
            return err(format!(
                "tokenizer.vocab_size must exceed {}",
                kdlm_core::tokenizer::BASE_VOCAB
            ));
        }
        if self.data.synthetic_sentences == 0 {
            return err("data.synthetic_sentences must be >= 1".into());
        }
        if self.curriculum.epochs_per_stage == 0 {
            return err("curriculum.epochs_per_stage must be >= 1".into());
        }
        if let Some(bad) = self.pipeline.stages.iter().find(|s| !STAGES.contains(&s.as_str())) {
            return err(format!("pipeline.stages: unknown stage {bad:?}; known: {STAGES:?}"));
        }
        kdlm_core::evaluation::sentence_scorers()
            .create(&self.eval.scorer, &())
            .map_err(|e| UsageError(format!("eval.scorer: {e}")))?;
        Ok(self)
    }
}

/// Deep-merges `patch` into `base`; objects merge key by key, anything
/// else replaces.
pub fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Applies `key.path=value`; the value is read as JSON when it parses and
/// as a plain string otherwise. Numeric path segments index arrays.
pub fn apply_set(tree: &mut Value, assignment: &str) -> Result<(), UsageError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| UsageError(format!("--set expects KEY=VALUE, got {assignment:?}")))?;
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(UsageError(format!("--set: malformed key {key:?}")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = tree;
    for seg in key.split('.') {
        node = match node {
            Value::Array(items) => {
                let len = items.len();
                let i: usize = seg
                    .parse()
                    .map_err(|_| UsageError(format!("--set {key}: {seg:?} must be an array index")))?;
                items
                    .get_mut(i)
                    .ok_or_else(|| UsageError(format!("--set {key}: index {i} out of range (length {len})")))?
            }
            Value::Object(map) => map.entry(seg.to_string()).or_insert(Value::Null),
            Value::Null => {
                *node = Value::Object(Map::new());
                node.as_object_mut().unwrap().entry(seg.to_string()).or_insert(Value::Null)
            }
            _ => return Err(UsageError(format!("--set {key}: {seg:?} is not inside an object"))),
        };
    }
    *node = value;
    Ok(())
}

/// The effective configuration of one run.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub config: RunConfig,
    pub snapshot: Value,
    pub sha256: String,
    pub path: Option<PathBuf>,
}

pub fn resolve(path: Option<&Path>, seed: Option<u64>, sets: &[String]) -> Result<Resolved, UsageError> {
    let mut tree = serde_json::to_value(RunConfig::default()).expect("default config serializes");
    if let Some(p) = path {
        let text = fs::read_to_string(p).map_err(|e| UsageError(format!("cannot read config {}: {e}", p.display())))?;
        let file: Value = serde_json::from_str(&text).map_err(|e| UsageError(format!("{}: {e}", p.display())))?;
        if !file.is_object() {
            return Err(UsageError(format!("{}: the config must be a JSON object", p.display())));
        }
        merge(&mut tree, file);
    }
    for s in sets {
        apply_set(&mut tree, s)?;
    }
    if let Some(seed) = seed {
        tree["seed"] = json!(seed);
    }
    let config: RunConfig = serde_path_to_error::deserialize(&tree).map_err(|e| {
        let at = e.path().to_string();
        UsageError(format!("config key {at}: {}", e.into_inner()))
    })?;
    let config = config.finish()?;
    let snapshot = serde_json::to_value(&config).expect("config serializes");
    let sha256 = kdlm_core::model::checkpoint::sha256_hex(snapshot.to_string().as_bytes());
    Ok(Resolved {
        config,
        snapshot,
        sha256,
        path: path.map(Path::to_path_buf),
    })
}

/// Documented config keys. `[]` stands for any array element.
pub const KEY_DOCS: &[(&str, &str)] = &[
    ("seed", "master seed; copied into every training stage and gap"),
    ("data.train_dir", "directory of raw training files named <source>.<ext>; null generates a synthetic corpus"),
    ("data.dev_dir", "directory of raw dev files; required with data.train_dir"),
    ("data.pairs", "tab-separated minimal pairs (phenomenon, good, bad); synthetic runs generate their own"),
    ("data.synthetic_sentences", "training sentences in a generated corpus"),
    ("tokenizer.vocab_size", "target BPE vocabulary including 4 specials and 256 bytes"),
    ("tokenizer.min_frequency", "pairs seen fewer times are never merged"),
    ("teachers", "list of teacher models; each is trained from scratch"),
    ("teachers[].name", "directory name and report label"),
    ("teachers[].model.preset", "architecture preset (see below)"),
    ("teachers[].model.overrides", "object of architecture fields replacing the preset's"),
    ("teachers[].train", "training settings, same keys as student.train"),
    ("student.model.preset", "student architecture preset"),
    ("student.model.overrides", "object of architecture fields replacing the preset's"),
    ("student.train.epochs", "regular training epochs"),
    ("student.train.batch", "chunks per optimizer step"),
    ("student.train.chunk_len", "tokens per training chunk"),
    ("student.train.use_offset", "shift chunk boundaries by a random per-epoch offset"),
    ("student.train.dev_chunks", "size of the fixed dev subset used for dev loss"),
    ("student.train.eval_batch", "chunks per dev-loss forward pass"),
    ("student.train.seed", "overwritten by the top-level seed"),
    ("student.train.optim.name", "optimizer: adamw or sgd"),
    ("student.train.optim.max_lr", "peak learning rate"),
    ("student.train.optim.betas", "AdamW moment decay rates [b1, b2]"),
    ("student.train.optim.eps", "AdamW denominator epsilon"),
    ("student.train.optim.weight_decay", "decoupled weight decay on matrices"),
    ("student.train.optim.grad_clip", "global gradient-norm clip; null disables"),
    ("student.train.schedule.warmup_steps", "linear warmup steps before the cosine decay"),
    ("student.train.schedule.total_steps", "schedule length; 0 derives it from the data"),
    ("student.train.schedule.min_lr", "learning rate at the end of the cosine"),
    ("student.train.sam", "null, or {rho, applied_epochs}: sharpness-aware epochs after the regular ones"),
    ("student.train.sam.rho", "SAM neighbourhood radius"),
    ("student.train.sam.applied_epochs", "number of SAM epochs"),
    ("distill.alpha", "weight of the hard-target cross-entropy"),
    ("distill.temperature", "softmax temperature for teacher and student"),
    ("distill.scale_kl_by_t2", "multiply the KL term by temperature squared"),
    ("distill.teachers", "teacher checkpoints for the distill command; the pipeline fills these in"),
    ("distill.ensemble", "teacher combination: logit_mean or prob_mean"),
    ("eval.scorer", "sentence score: sum or token_mean"),
    ("eval.bos", "prepend <bos> so the first token is scored"),
    ("eval.threads", "scoring threads; 0 uses every core"),
    ("curriculum.enabled", "add readability buckets easy to hard during training"),
    ("curriculum.epochs_per_stage", "epochs before the next bucket joins"),
    ("gap.steps", "gradient-ascent steps"),
    ("gap.lr", "gradient-ascent learning rate"),
    ("gap.batch", "chunks per ascent step"),
    ("gap.chunk_len", "tokens per chunk"),
    ("gap.seed", "overwritten by the top-level seed"),
    ("pipeline.stages", "stages to run, in order: clean, tokenize, teachers, distill, ce_only, eval"),
];

/// Every leaf key of `tree`, with array elements collapsed to `[]` and
/// teacher and student training keys folded together.
pub fn leaf_keys(tree: &Value) -> BTreeSet<String> {
    fn walk(v: &Value, prefix: String, out: &mut BTreeSet<String>) {
        match v {
            Value::Object(m) if !m.is_empty() => {
                for (k, child) in m {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(child, key, out);
                }
            }
            Value::Array(items) if items.iter().any(Value::is_object) => {
                for item in items {
                    walk(item, format!("{prefix}[]"), out);
                }
            }
            _ => {
                out.insert(prefix);
            }
        }
    }
    let mut out = BTreeSet::new();
    walk(tree, String::new(), &mut out);
    out.into_iter()
        .map(|k| match k.strip_prefix("teachers[].train.") {
            Some(rest) => format!("student.train.{rest}"),
            None => k,
        })
        .collect()
}

pub fn config_help() -> String {
    let defaults = serde_json::to_value(RunConfig::default()).expect("default config serializes");
    let lookup = |key: &str| -> Option<String> {
        let mut node = &defaults;
        for seg in key.split('.') {
            node = node.get(seg)?;
        }
        Some(node.to_string())
    };
    let width = KEY_DOCS.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut out = String::from(
        "CONFIG KEYS (JSON file via --config, single keys via --set key=value):\n",
    );
    for (k, doc) in KEY_DOCS {
        match lookup(k).filter(|d| d.len() <= 40) {
            Some(d) => out.push_str(&format!("  {k:<width$}  {doc} [default: {d}]\n")),
            None => out.push_str(&format!("  {k:<width$}  {doc}\n")),
        }
    }
    out.push_str(&format!(
        "\nArchitecture presets: {}\n",
        kdlm_core::model::config::PRESET_NAMES.join(", ")
    ));
    out.push_str("Architecture override keys: family, n_layers, n_heads, hidden, intermediate, max_seq, tie_embeddings, norm_eps, rope_base, moe {n_experts, capacity_factor, aux_loss_coeff}\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_default_key_is_documented() {
        let documented: BTreeSet<&str> = KEY_DOCS.iter().map(|(k, _)| *k).collect();
        let tree = serde_json::to_value(RunConfig::default()).unwrap();
        for k in leaf_keys(&tree) {
            assert!(documented.contains(k.as_str()), "undocumented key {k}");
        }
        let help = config_help();
        for (k, _) in KEY_DOCS {
            assert!(help.contains(k));
        }
    }

    #[test]
    fn defaults_follow_the_full_scale_recipe() {
        let c = resolve(None, None, &[]).unwrap().config;
        assert_eq!(c.tokenizer.vocab_size, 16000);
        assert_eq!(c.teachers[0].train.epochs, 6);
        assert_eq!(c.teachers[0].train.batch, 256);
        assert_eq!(c.teachers[0].train.optim.max_lr, 2.5e-4);
        assert_eq!(c.teachers[1].train.batch, 128);
        assert_eq!(c.student.train.batch, 32);
        assert_eq!(c.student.train.chunk_len, 128);
        assert_eq!(c.distill.temperature, 2.0);
        assert_eq!(c.distill.alpha, 0.5);
        assert_eq!(c.student.train.schedule.warmup_steps, 200);
    }

    #[test]
    fn overrides_layer_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"seed": 4, "student": {"train": {"epochs": 2}}}"#).unwrap();
        let sets = vec![
            "student.train.epochs=3".to_string(),
            "teachers.1.train.optim.max_lr=0.01".to_string(),
            "eval.scorer=token_mean".to_string(),
        ];
        let r = resolve(Some(&p), Some(9), &sets).unwrap();
        assert_eq!(r.config.seed, 9);
        assert_eq!(r.config.student.train.epochs, 3);
        assert_eq!(r.config.student.train.batch, 32);
        assert_eq!(r.config.student.train.seed, 9);
        assert_eq!(r.config.teachers[1].train.optim.max_lr, 0.01);
        assert_eq!(r.config.eval.scorer, "token_mean");
        assert_eq!(r.snapshot["student"]["train"]["optim"]["name"], "adamw");
    }

    #[test]
    fn errors_name_the_offending_key() {
        let e = resolve(None, None, &["student.train.epocs=3".into()]).unwrap_err();
        assert!(e.0.contains("student.train") && e.0.contains("epocs"), "{}", e.0);
        let e = resolve(None, None, &["student.train.batch=\"x\"".into()]).unwrap_err();
        assert!(e.0.contains("student.train.batch"), "{}", e.0);
        assert!(resolve(None, None, &["teachers.5.name=x".into()]).is_err());
        assert!(resolve(None, None, &["novalue".into()]).is_err());
        assert!(resolve(None, None, &["eval.scorer=median".into()]).is_err());
        assert!(resolve(None, None, &["pipeline.stages=[\"train\"]".into()]).is_err());
        assert!(resolve(None, None, &["teachers.1.name=teacher_a".into()]).is_err());
    }

    #[test]
    fn snapshot_hash_is_stable() {
        let a = resolve(None, Some(1), &[]).unwrap();
        let b = resolve(None, Some(1), &[]).unwrap();
        assert_eq!(a.sha256, b.sha256);
        assert_ne!(a.sha256, resolve(None, Some(2), &[]).unwrap().sha256);
    }
}
