//! End-to-end run: clean, tokenize, teachers, distilled and CE-only
//! students, then a comparison report.
//!
//! Every stage owns a directory under `--out` with its own manifest. The
//! manifest records a fingerprint of everything the stage depends on; a
//! complete stage with a matching fingerprint is skipped, a stale one is
//! wiped and rerun, and an interrupted training stage resumes from its
//! latest epoch checkpoint.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use kdlm_core::dataloader::{chunk_count, fixed_dev_subset, Split, TokenStream};
use kdlm_core::distillation::Ensemble;
use kdlm_core::evaluation::{minimal_pair_accuracy, read_pairs, MinimalPair, PairReport};
use kdlm_core::model::checkpoint::{file_sha256, sha256_hex, write_atomic};
use kdlm_core::model::LanguageModel;
use kdlm_core::tokenizer::TokenizerModel;
use kdlm_core::training::evaluate_loss;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::commands::{clean_dir, distill_model, final_checkpoint, latest_epoch_checkpoint, load_data, load_model, synth, tokenize, train_model, PAIRS_FILE};
use crate::config::{Resolved, RunConfig};
use crate::manifest::{RunManifest, Status};
use crate::UsageError;

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TXT: &str = "report.txt";

/// Directory layout of one pipeline run.
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn raw(&self) -> PathBuf {
        self.root.join("raw")
    }
    pub fn clean(&self) -> PathBuf {
        self.root.join("clean")
    }
    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn teacher(&self, name: &str) -> PathBuf {
        self.root.join("teachers").join(name)
    }
    pub fn distilled(&self) -> PathBuf {
        self.root.join("students").join("distilled")
    }
    pub fn ce_only(&self) -> PathBuf {
        self.root.join("students").join("ce_only")
    }
    pub fn eval(&self) -> PathBuf {
        self.root.join("eval")
    }
}

fn fingerprint(parts: serde_json::Value) -> String {
    sha256_hex(parts.to_string().as_bytes())
}

struct Fingerprints {
    clean: String,
    tokenize: String,
    teachers: Vec<String>,
    distill: String,
    ce_only: String,
    eval: String,
}

impl Fingerprints {
    fn new(cfg: &RunConfig) -> Self {
        let synthetic = cfg.data.train_dir.is_none();
        let clean = fingerprint(json!(["clean", cfg.data, if synthetic { Some(cfg.seed) } else { None }]));
        let tokenize = fingerprint(json!(["tokenize", clean, cfg.tokenizer]));
        let teachers: Vec<String> = cfg
            .teachers
            .iter()
            .map(|t| fingerprint(json!(["teacher", tokenize, t, cfg.curriculum])))
            .collect();
        let mut distill_cfg = cfg.distill.clone();
        distill_cfg.teachers.clear();
        let distill = fingerprint(json!(["distill", tokenize, teachers, cfg.student, distill_cfg, cfg.curriculum]));
        let ce_only = fingerprint(json!(["ce_only", tokenize, cfg.student, cfg.curriculum]));
        let eval = fingerprint(json!(["eval", clean, tokenize, teachers, distill, ce_only, cfg.eval, cfg.distill.ensemble, cfg.seed]));
        Self {
            clean,
            tokenize,
            teachers,
            distill,
            ce_only,
            eval,
        }
    }
}

fn complete(dir: &Path) -> Option<RunManifest> {
    RunManifest::read(dir).filter(|m| m.status == Status::Complete)
}

/// Runs `body` in `dir` unless a complete run with the same fingerprint
/// is already there. `body` receives the checkpoint to resume from.
fn stage(resolved: &Resolved, name: &str, dir: &Path, fp: &str, inputs: Vec<PathBuf>, body: impl FnOnce(Option<PathBuf>) -> Result<Vec<PathBuf>>) -> Result<()> {
    match RunManifest::read(dir) {
        Some(m) if m.status == Status::Complete && m.fingerprint == fp => {
            log::info!("stage {name}: up to date, skipping");
            return Ok(());
        }
        Some(m) if m.fingerprint != fp => {
            log::info!("stage {name}: settings changed, starting over");
            fs::remove_dir_all(dir).with_context(|| format!("clearing {}", dir.display()))?;
        }
        _ => {}
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let resume = latest_epoch_checkpoint(dir);
    if let Some(r) = &resume {
        log::info!("stage {name}: resuming from {}", r.display());
    }
    let (manifest, started) = RunManifest::start(&format!("pipeline:{name}"), resolved, fp, inputs);
    manifest.write(dir)?;
    log::info!("stage {name}: running");
    let outputs = body(resume).with_context(|| format!("stage {name} failed"))?;
    manifest.finish(dir, started, outputs)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelResult {
    pub name: String,
    pub role: String,
    pub checkpoint_sha256: Option<String>,
    pub dev_loss: f64,
    pub dev_perplexity: f64,
    pub pairs: Option<PairReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ordering {
    /// Distilled student beats the ensemble.
    pub distilled_over_ensemble: bool,
    /// Ensemble beats every individual teacher.
    pub ensemble_over_teachers: bool,
    /// Distilled minus CE-only student (accuracy in points, loss in nats).
    pub distilled_minus_ce_only: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub seed: u64,
    pub chunk_len: usize,
    pub dev_chunks: usize,
    pub n_pairs: usize,
    pub models: Vec<ModelResult>,
    pub by_dev_loss: Ordering,
    pub by_pair_accuracy: Option<Ordering>,
}

impl ComparisonReport {
    pub fn model(&self, name: &str) -> Option<&ModelResult> {
        self.models.iter().find(|m| m.name == name)
    }

    pub fn to_table(&self) -> String {
        let phenomena: BTreeSet<&String> = self.models.iter().filter_map(|m| m.pairs.as_ref()).flat_map(|p| p.phenomena.keys()).collect();
        let width = self.models.iter().map(|m| m.name.len()).max().unwrap_or(5).max(5);
        let mut out = format!("{:<width$}  {:>8}  {:>10}  {:>8}", "model", "dev CE", "perplexity", "pairs %");
        for p in &phenomena {
            out.push_str(&format!("  {p:>w$}", w = p.len().max(7)));
        }
        out.push('\n');
        for m in &self.models {
            let acc = m.pairs.as_ref().map_or("-".to_string(), |p| format!("{:.2}", p.overall));
            out.push_str(&format!("{:<width$}  {:>8.4}  {:>10.3}  {acc:>8}", m.name, m.dev_loss, m.dev_perplexity));
            for p in &phenomena {
                let v = m.pairs.as_ref().and_then(|r| r.phenomena.get(*p)).map_or("-".to_string(), |v| format!("{v:.2}"));
                out.push_str(&format!("  {v:>w$}", w = p.len().max(7)));
            }
            out.push('\n');
        }
        let yn = |b: bool| if b { "yes" } else { "no" };
        out.push_str(&format!(
            "\nby dev CE: distilled < ensemble: {}; ensemble < every teacher: {}; distilled - CE-only: {:+.4} nats\n",
            yn(self.by_dev_loss.distilled_over_ensemble),
            yn(self.by_dev_loss.ensemble_over_teachers),
            self.by_dev_loss.distilled_minus_ce_only
        ));
        if let Some(o) = &self.by_pair_accuracy {
            out.push_str(&format!(
                "by pairs: distilled > ensemble: {}; ensemble > every teacher: {}; distilled - CE-only: {:+.2} points ({} pairs)\n",
                yn(o.distilled_over_ensemble),
                yn(o.ensemble_over_teachers),
                o.distilled_minus_ce_only,
                self.n_pairs
            ));
        }
        out
    }
}

fn ordering(models: &[ModelResult], key: impl Fn(&ModelResult) -> f64) -> Ordering {
    let get = |n: &str| models.iter().find(|m| m.name == n).map(&key).expect("model present");
    let (d, e, c) = (get("distilled"), get("ensemble"), get("ce_only"));
    Ordering {
        distilled_over_ensemble: d > e,
        ensemble_over_teachers: models.iter().filter(|m| m.role == "teacher").all(|m| e > key(m)),
        distilled_minus_ce_only: d - c,
    }
}

pub fn evaluate_models(cfg: &RunConfig, layout: &Layout, pairs: Option<&[MinimalPair]>) -> Result<ComparisonReport> {
    let d = load_data(&layout.data(), &Default::default())?;
    let tok: &TokenizerModel = &d.tokenizer;
    let train = &cfg.student.train;
    let stream = TokenStream::new(d.data.dev.clone(), Split::Dev);
    let available = chunk_count(stream.ids.len(), train.chunk_len, 0);
    let n_dev = train.dev_chunks.min(available);
    if n_dev == 0 {
        bail!(kdlm_core::Error::Degenerate(format!("the dev split has no full chunk of {} tokens", train.chunk_len)));
    }
    let dev = fixed_dev_subset(&stream, train.chunk_len, n_dev, cfg.seed)?;

    let mut entries: Vec<(String, String, Option<PathBuf>, Arc<dyn LanguageModel<f32>>)> = Vec::new();
    let mut members: Vec<Arc<dyn LanguageModel<f32>>> = Vec::new();
    for t in &cfg.teachers {
        let p = final_checkpoint(&layout.teacher(&t.name));
        let m: Arc<dyn LanguageModel<f32>> = Arc::new(load_model(&p)?);
        members.push(m.clone());
        entries.push((t.name.clone(), "teacher".into(), Some(p), m));
    }
    entries.push(("ensemble".into(), "ensemble".into(), None, Arc::new(Ensemble::new(members, &cfg.distill.ensemble)?)));
    for (name, dir) in [("distilled", layout.distilled()), ("ce_only", layout.ce_only())] {
        let p = final_checkpoint(&dir);
        entries.push((name.into(), "student".into(), Some(p.clone()), Arc::new(load_model(&p)?)));
    }

    let mut models = Vec::with_capacity(entries.len());
    for (name, role, path, model) in entries {
        let dev_loss = evaluate_loss(model.as_ref(), &dev, train.eval_batch)?;
        let pairs = match pairs {
            Some(p) => Some(PairReport::new(&minimal_pair_accuracy(model.as_ref(), tok, p, &cfg.eval)?, None)),
            None => None,
        };
        log::info!("eval {name}: dev CE {dev_loss:.4}{}", pairs.as_ref().map_or(String::new(), |p| format!(", pairs {:.2}%", p.overall)));
        models.push(ModelResult {
            name,
            role,
            checkpoint_sha256: path.as_deref().map(file_sha256).transpose()?,
            dev_loss,
            dev_perplexity: dev_loss.exp(),
            pairs,
        });
    }
    let by_dev_loss = ordering(&models, |m| -m.dev_loss);
    let by_dev_loss = Ordering {
        distilled_minus_ce_only: -by_dev_loss.distilled_minus_ce_only,
        ..by_dev_loss
    };
    let by_pair_accuracy = pairs.map(|_| ordering(&models, |m| m.pairs.as_ref().map_or(0.0, |p| p.overall)));
    Ok(ComparisonReport {
        seed: cfg.seed,
        chunk_len: train.chunk_len,
        dev_chunks: n_dev,
        n_pairs: pairs.map_or(0, <[MinimalPair]>::len),
        models,
        by_dev_loss,
        by_pair_accuracy,
    })
}

fn pairs_path(cfg: &RunConfig, layout: &Layout) -> Option<PathBuf> {
    match (&cfg.data.pairs, &cfg.data.train_dir) {
        (Some(p), _) => Some(p.clone()),
        (None, None) => Some(layout.raw().join(PAIRS_FILE)),
        (None, Some(_)) => None,
    }
}

fn deps(stage: &str) -> &'static [&'static str] {
    match stage {
        "tokenize" => &["clean"],
        "teachers" | "ce_only" => &["tokenize"],
        "distill" => &["tokenize", "teachers"],
        "eval" => &["clean", "tokenize", "teachers", "distill", "ce_only"],
        _ => &[],
    }
}

/// Checks, before any compute, that every stage a requested stage
/// depends on is either requested too or already complete on disk.
fn preflight(cfg: &RunConfig, layout: &Layout) -> Result<()> {
    let requested: BTreeSet<&str> = cfg.pipeline.stages.iter().map(String::as_str).collect();
    let needed: BTreeSet<&str> = requested.iter().flat_map(|s| deps(s).iter().copied()).filter(|d| !requested.contains(d)).collect();
    for stage in needed {
        let dirs: Vec<PathBuf> = match stage {
            "clean" => vec![layout.clean()],
            "tokenize" => vec![layout.data()],
            "teachers" => cfg.teachers.iter().map(|t| layout.teacher(&t.name)).collect(),
            "distill" => vec![layout.distilled()],
            "ce_only" => vec![layout.ce_only()],
            _ => vec![],
        };
        for dir in dirs {
            if stage == "teachers" || stage == "distill" || stage == "ce_only" {
                let ck = final_checkpoint(&dir);
                if !ck.is_file() {
                    bail!(UsageError(format!("stage {stage} is not requested and its checkpoint {} is missing", ck.display())));
                }
            }
            if complete(&dir).is_none() {
                bail!(UsageError(format!("stage {stage} is not requested and {} holds no complete run", dir.display())));
            }
        }
    }
    if cfg.data.train_dir.is_some() != cfg.data.dev_dir.is_some() {
        bail!(UsageError("data.train_dir and data.dev_dir must be set together".into()));
    }
    Ok(())
}

/// Returns the comparison report when the eval stage has run.
pub fn run_pipeline(resolved: &Resolved, out: &Path) -> Result<Option<ComparisonReport>> {
    let cfg = &resolved.config;
    let layout = Layout { root: out.to_path_buf() };
    preflight(cfg, &layout)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let fp = Fingerprints::new(cfg);
    let (manifest, started) = RunManifest::start("pipeline", resolved, &fp.eval, vec![]);
    let wants = |s: &str| cfg.pipeline.stages.iter().any(|x| x == s);

    if wants("clean") {
        let (train_in, dev_in) = match (&cfg.data.train_dir, &cfg.data.dev_dir) {
            (Some(t), Some(d)) => (t.clone(), d.clone()),
            _ => (layout.raw().join("train"), layout.raw().join("dev")),
        };
        let inputs = vec![train_in.clone(), dev_in.clone()];
        stage(resolved, "clean", &layout.clean(), &fp.clean, inputs, |_| {
            let mut outputs = Vec::new();
            if cfg.data.train_dir.is_none() {
                outputs.extend(synth(cfg.seed, cfg.data.synthetic_sentences, &layout.raw())?);
            }
            outputs.extend(clean_dir(&train_in, &layout.clean().join("train"))?);
            outputs.extend(clean_dir(&dev_in, &layout.clean().join("dev"))?);
            Ok(outputs)
        })?;
    }
    if wants("tokenize") {
        let (train, dev) = (layout.clean().join("train"), layout.clean().join("dev"));
        stage(resolved, "tokenize", &layout.data(), &fp.tokenize, vec![train.clone(), dev.clone()], |_| {
            tokenize(&train, &dev, cfg.tokenizer.bpe(), &layout.data())
        })?;
    }
    let needs_data = ["teachers", "distill", "ce_only"].iter().any(|s| wants(s));
    let data = if needs_data { Some(load_data(&layout.data(), &cfg.curriculum)?) } else { None };
    let vocab = data.as_ref().map_or(0, |d| d.tokenizer.vocab_size());
    if wants("teachers") {
        let d = data.as_ref().expect("loaded above");
        for (t, tfp) in cfg.teachers.iter().zip(&fp.teachers) {
            let dir = layout.teacher(&t.name);
            let model = t.model.resolve(vocab)?;
            stage(resolved, &format!("teacher {}", t.name), &dir, tfp, vec![layout.data()], |resume| {
                Ok(vec![train_model(&model, &t.train, &d.data, &dir, resume)?])
            })?;
        }
    }
    if wants("distill") {
        let d = data.as_ref().expect("loaded above");
        let mut distill = cfg.distill.clone();
        distill.teachers = cfg.teachers.iter().map(|t| final_checkpoint(&layout.teacher(&t.name))).collect();
        crate::commands::preflight_teachers(&distill.teachers)?;
        let student = cfg.student.model.resolve(vocab)?;
        let dir = layout.distilled();
        let inputs = std::iter::once(layout.data()).chain(distill.teachers.iter().cloned()).collect();
        stage(resolved, "distill", &dir, &fp.distill, inputs, |resume| {
            Ok(vec![distill_model(&student, &distill, &cfg.student.train, &d.data, &dir, resume)?])
        })?;
    }
    if wants("ce_only") {
        let d = data.as_ref().expect("loaded above");
        let student = cfg.student.model.resolve(vocab)?;
        let dir = layout.ce_only();
        stage(resolved, "ce_only", &dir, &fp.ce_only, vec![layout.data()], |resume| {
            Ok(vec![train_model(&student, &cfg.student.train, &d.data, &dir, resume)?])
        })?;
    }
    let report_path = layout.eval().join(REPORT_JSON);
    if wants("eval") {
        let pairs = match pairs_path(cfg, &layout) {
            Some(p) => Some(read_pairs(&p)?),
            None => {
                log::warn!("no minimal pairs configured (data.pairs); reporting dev loss only");
                None
            }
        };
        let dir = layout.eval();
        stage(resolved, "eval", &dir, &fp.eval, vec![layout.data()], |_| {
            let report = evaluate_models(cfg, &layout, pairs.as_deref())?;
            let mut text = serde_json::to_string_pretty(&report)?;
            text.push('\n');
            write_atomic(&report_path, text.as_bytes())?;
            let table = report.to_table();
            write_atomic(&dir.join(REPORT_TXT), table.as_bytes())?;
            print!("{table}");
            Ok(vec![report_path.clone(), dir.join(REPORT_TXT)])
        })?;
    }
    let outputs = if wants("eval") { vec![report_path.clone()] } else { vec![] };
    manifest.finish(out, started, outputs)?;
    if wants("eval") {
        Ok(Some(serde_json::from_str(&fs::read_to_string(&report_path)?)?))
    } else {
        Ok(None)
    }
}
