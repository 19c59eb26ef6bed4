//! Subcommand implementations. Each operation takes explicit paths so the
//! pipeline can reuse it stage by stage.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use kdlm_core::corpus::{build_curriculum, clean_document, compute_readability, curriculum_active_sources, CurriculumPlan, RawDocument, ReadabilityReport, SourceKind};
use kdlm_core::dataloader::cache::{read_token_cache, write_token_cache};
use kdlm_core::dataloader::generate_synthetic_corpus;
use kdlm_core::distillation::{distill_train, DistillConfig, Ensemble};
use kdlm_core::evaluation::{format_pairs, minimal_pair_accuracy, read_pairs, word_average_surprisal, PairReport};
use kdlm_core::extensions::gap::gap_posttrain;
use kdlm_core::model::checkpoint::{file_sha256, write_atomic};
use kdlm_core::model::{Checkpoint, LanguageModel, Model, ModelConfig};
use kdlm_core::tokenizer::{train_bpe_files, BpeConfig, TokenizerModel};
use kdlm_core::training::{pretrain, RunOutput, TrainConfig, TrainingData, FINAL_CHECKPOINT};
use serde::{Deserialize, Serialize};

use crate::config::{resolve, CurriculumSettings, RunConfig};
use crate::manifest::RunManifest;
use crate::{Command, UsageError};

pub const SOURCES_FILE: &str = "sources.json";
pub const READABILITY_DIR: &str = "_readability";
pub const PAIRS_FILE: &str = "pairs.tsv";

fn hidden(name: &std::ffi::OsStr) -> bool {
    let n = name.to_string_lossy();
    n.starts_with('.') || n.starts_with('_')
}

/// Regular files under `dir` in path order, skipping names that start
/// with `.` or `_` (tool-generated sidecars).
pub fn list_files(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        bail!(UsageError(format!("{} is not a directory", dir.display())));
    }
    let mut out = Vec::new();
    for entry in walkdir::WalkDir::new(dir)
        .sort_by_file_name()
        .into_iter()
        .filter_entry(|e| e.depth() == 0 || !hidden(e.file_name()))
    {
        let entry = entry.with_context(|| format!("listing {}", dir.display()))?;
        if entry.file_type().is_file() {
            out.push(entry.into_path());
        }
    }
    Ok(out)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

/// Writes `train/synthetic.train`, `dev/synthetic.dev` and `pairs.tsv`.
pub fn synth(seed: u64, n_sentences: usize, out: &Path) -> Result<Vec<PathBuf>> {
    let corpus = generate_synthetic_corpus(seed, n_sentences)?;
    let files = [
        (out.join("train").join("synthetic.train"), corpus.train),
        (out.join("dev").join("synthetic.dev"), corpus.dev),
        (out.join(PAIRS_FILE), format_pairs(&corpus.pairs)),
    ];
    for (p, text) in &files {
        write_atomic(p, text.as_bytes())?;
    }
    Ok(files.into_iter().map(|(p, _)| p).collect())
}

/// Cleans every file under `input` into the same relative path under
/// `out`, with a readability report per file in `out/_readability/`.
pub fn clean_dir(input: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let files = list_files(input)?;
    if files.is_empty() {
        bail!(kdlm_core::Error::Degenerate(format!("no input files under {}", input.display())));
    }
    let mut outputs = Vec::with_capacity(files.len());
    for path in files {
        let rel = path.strip_prefix(input).expect("listed under input");
        let doc = RawDocument::read(&path)?;
        if !doc.source.is_known() {
            log::warn!("{}: unknown source {:?}; applying universal cleaning rules only", path.display(), doc.source.name());
        }
        let cleaned = clean_document(&doc)?;
        let dest = out.join(rel);
        write_atomic(&dest, cleaned.as_bytes())?;
        outputs.push(dest);
        match compute_readability(&cleaned) {
            Ok(report) => {
                let mut name = rel.as_os_str().to_owned();
                name.push(".json");
                let rp = out.join(READABILITY_DIR).join(name);
                write_json(&rp, &report)?;
                outputs.push(rp);
            }
            Err(e) => log::warn!("{}: no readability report ({e})", path.display()),
        }
    }
    Ok(outputs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceSummary {
    pub files: Vec<String>,
    pub tokens: usize,
    pub readability: Option<ReadabilityReport>,
}

fn read_text(path: &Path) -> Result<String> {
    Ok(RawDocument::read(path)?.text)
}

/// Training files grouped by source, in path order.
fn group_by_source(dir: &Path) -> Result<BTreeMap<SourceKind, Vec<PathBuf>>> {
    let mut groups: BTreeMap<SourceKind, Vec<PathBuf>> = BTreeMap::new();
    for p in list_files(dir)? {
        groups.entry(SourceKind::from_path(&p)).or_default().push(p);
    }
    if groups.is_empty() {
        bail!(kdlm_core::Error::Degenerate(format!("no files under {}", dir.display())));
    }
    Ok(groups)
}

/// Trains the tokenizer on `train` only and caches token ids of both
/// splits: `tokens/train/<source>.tokens` and `tokens/dev.tokens`.
pub fn tokenize(train: &Path, dev: &Path, bpe: BpeConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let groups = group_by_source(train)?;
    let train_files: Vec<&Path> = groups.values().flatten().map(PathBuf::as_path).collect();
    let tok = train_bpe_files(&train_files, bpe)?;
    tok.save(out)?;
    log::info!("tokenizer: {} tokens ({} merges)", tok.vocab_size(), tok.merges().len());
    let vocab = tok.vocab_size() as u32;
    let mut cache = std::collections::HashMap::new();
    let mut outputs = vec![out.join("vocab.json"), out.join("merges.txt"), out.join("tokenizer.json")];
    let mut summary = BTreeMap::new();
    for (source, files) in &groups {
        let mut ids = Vec::new();
        let mut text = String::new();
        for f in files {
            let t = read_text(f)?;
            ids.extend(tok.encode_cached(&t, &mut cache));
            text.push_str(&t);
            if !text.ends_with('\n') {
                text.push('\n');
            }
        }
        let p = out.join("tokens").join("train").join(format!("{}.tokens", source.name()));
        write_token_cache(&p, &ids, vocab)?;
        outputs.push(p);
        summary.insert(
            source.name().to_string(),
            SourceSummary {
                files: files.iter().map(|f| f.strip_prefix(train).unwrap_or(f).display().to_string()).collect(),
                tokens: ids.len(),
                readability: compute_readability(&text).ok(),
            },
        );
    }
    let mut dev_ids = Vec::new();
    let dev_files = list_files(dev)?;
    if dev_files.is_empty() {
        bail!(kdlm_core::Error::Degenerate(format!("no dev files under {}", dev.display())));
    }
    for f in dev_files {
        dev_ids.extend(tok.encode_cached(&read_text(&f)?, &mut cache));
    }
    let p = out.join("tokens").join("dev.tokens");
    write_token_cache(&p, &dev_ids, vocab)?;
    outputs.push(p);
    let p = out.join(SOURCES_FILE);
    write_json(&p, &summary)?;
    outputs.push(p);
    Ok(outputs)
}

/// Tokenizer and token streams produced by [`tokenize`].
pub struct DataDir {
    pub tokenizer: TokenizerModel,
    pub data: TrainingData,
}

pub fn curriculum_from_reports(reports: &BTreeMap<SourceKind, ReadabilityReport>, settings: &CurriculumSettings) -> Result<CurriculumPlan> {
    let mut plan = build_curriculum(reports)?;
    plan.epochs_per_stage = settings.epochs_per_stage;
    Ok(plan)
}

pub fn load_data(dir: &Path, curriculum: &CurriculumSettings) -> Result<DataDir> {
    let tokenizer = TokenizerModel::load(dir).with_context(|| format!("loading tokenizer from {}", dir.display()))?;
    let vocab = tokenizer.vocab_size() as u32;
    let summary: BTreeMap<String, SourceSummary> = serde_json::from_str(
        &fs::read_to_string(dir.join(SOURCES_FILE)).with_context(|| format!("reading {}", dir.join(SOURCES_FILE).display()))?,
    )?;
    let mut train = Vec::with_capacity(summary.len());
    for name in summary.keys() {
        let (ids, v) = read_token_cache(&dir.join("tokens").join("train").join(format!("{name}.tokens")))?;
        if v != vocab {
            bail!(kdlm_core::Error::Format {
                what: "token cache",
                detail: format!("{name}: vocabulary {v} but the tokenizer has {vocab}"),
            });
        }
        train.push((SourceKind::parse(name), ids));
    }
    let (dev, v) = read_token_cache(&dir.join("tokens").join("dev.tokens"))?;
    if v != vocab {
        bail!(kdlm_core::Error::Format {
            what: "token cache",
            detail: format!("dev: vocabulary {v} but the tokenizer has {vocab}"),
        });
    }
    let plan = if curriculum.enabled {
        let reports = summary
            .iter()
            .filter_map(|(k, s)| s.readability.clone().map(|r| (SourceKind::parse(k), r)))
            .collect();
        Some(curriculum_from_reports(&reports, curriculum)?)
    } else {
        None
    };
    let data = TrainingData { train, dev, curriculum: plan };
    data.validate(tokenizer.vocab_size())?;
    Ok(DataDir { tokenizer, data })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurriculumOutput {
    pub readability: BTreeMap<String, ReadabilityReport>,
    pub plan: CurriculumPlan,
    /// Active sources for each epoch until every bucket has joined.
    pub schedule: Vec<Vec<String>>,
}

pub fn curriculum(input: &Path, settings: &CurriculumSettings) -> Result<CurriculumOutput> {
    let mut reports = BTreeMap::new();
    for (source, files) in group_by_source(input)? {
        let mut text = String::new();
        for f in files {
            text.push_str(&read_text(&f)?);
            text.push('\n');
        }
        match compute_readability(&text) {
            Ok(r) => {
                reports.insert(source, r);
            }
            Err(e) => log::warn!("{}: skipped ({e})", source.name()),
        }
    }
    let plan = curriculum_from_reports(&reports, settings)?;
    let n_epochs = plan.buckets.len() as u64 * plan.epochs_per_stage;
    let schedule = (0..n_epochs)
        .map(|e| curriculum_active_sources(&plan, e).iter().map(|s| s.name().to_string()).collect())
        .collect();
    Ok(CurriculumOutput {
        readability: reports.into_iter().map(|(k, v)| (k.name().to_string(), v)).collect(),
        plan,
        schedule,
    })
}

/// Latest `epoch-*.ckpt` in `dir`, if any.
pub fn latest_epoch_checkpoint(dir: &Path) -> Option<PathBuf> {
    let mut found: Vec<PathBuf> = fs::read_dir(dir)
        .ok()?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let n = p.file_name().unwrap_or_default().to_string_lossy();
            n.starts_with("epoch-") && n.ends_with(".ckpt")
        })
        .collect();
    found.sort();
    found.pop()
}

pub fn train_model(model: &ModelConfig, train: &TrainConfig, data: &TrainingData, out: &Path, resume: Option<PathBuf>) -> Result<PathBuf> {
    let run = RunOutput {
        dir: Some(out.to_path_buf()),
        resume,
    };
    Ok(pretrain(model, train, data, &run)?.final_path.expect("output dir given"))
}

pub fn distill_model(student: &ModelConfig, distill: &DistillConfig, train: &TrainConfig, data: &TrainingData, out: &Path, resume: Option<PathBuf>) -> Result<PathBuf> {
    let run = RunOutput {
        dir: Some(out.to_path_buf()),
        resume,
    };
    Ok(distill_train(student, distill, train, data, &run)?.final_path.expect("output dir given"))
}

/// Refuses to start when a teacher checkpoint is missing.
pub fn preflight_teachers(paths: &[PathBuf]) -> Result<()> {
    if paths.is_empty() {
        bail!(UsageError("distillation needs at least one teacher checkpoint (--teacher or distill.teachers)".into()));
    }
    if let Some(p) = paths.iter().find(|p| !p.is_file()) {
        bail!(UsageError(format!("teacher checkpoint {} does not exist", p.display())));
    }
    Ok(())
}

pub fn load_model(path: &Path) -> Result<Model<f32>> {
    Ok(Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?.to_model()?)
}

fn no_resume(cmd: &str, resume: &Option<PathBuf>) -> Result<()> {
    if resume.is_some() {
        bail!(UsageError(format!("{cmd} does not take --resume")));
    }
    Ok(())
}

pub fn run(cmd: Command) -> Result<()> {
    if let Command::Pipeline { common } = &cmd {
        no_resume("pipeline", &common.resume)?;
        let resolved = resolve(common.config.as_deref(), common.seed, &common.set)?;
        return crate::pipeline::run_pipeline(&resolved, &common.out).map(|_| ());
    }
    let name = cmd.name();
    let common = cmd.common().clone();
    let resolved = resolve(common.config.as_deref(), common.seed, &common.set)?;
    let cfg: &RunConfig = &resolved.config;
    let out = common.out.as_path();
    let inputs: Vec<PathBuf> = match &cmd {
        Command::Synth { .. } | Command::Pipeline { .. } => vec![],
        Command::Clean { input, .. } | Command::Curriculum { input, .. } => vec![input.clone()],
        Command::Tokenize { train, dev, .. } => vec![train.clone(), dev.clone()],
        Command::Pretrain { data, .. } => vec![data.clone()],
        Command::Distill { data, teacher, .. } => std::iter::once(data.clone()).chain(teacher.iter().cloned()).collect(),
        Command::EvalPairs { checkpoint, tokenizer, pairs, .. } => checkpoint.iter().cloned().chain([tokenizer.clone(), pairs.clone()]).collect(),
        Command::Surprisal { checkpoint, tokenizer, corpus, .. } => vec![checkpoint.clone(), tokenizer.clone(), corpus.clone()],
        Command::Gap { checkpoint, data, .. } => vec![checkpoint.clone(), data.clone()],
    };
    if let Some(missing) = inputs.iter().find(|p| !p.exists()) {
        bail!(UsageError(format!("input {} does not exist", missing.display())));
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let (manifest, started) = RunManifest::start(name, &resolved, &resolved.sha256, inputs);
    let outputs = match cmd {
        Command::Synth { common } => {
            no_resume(name, &common.resume)?;
            synth(cfg.seed, cfg.data.synthetic_sentences, out)?
        }
        Command::Clean { common, input } => {
            no_resume(name, &common.resume)?;
            clean_dir(&input, out)?
        }
        Command::Tokenize { common, train, dev } => {
            no_resume(name, &common.resume)?;
            tokenize(&train, &dev, cfg.tokenizer.bpe(), out)?
        }
        Command::Curriculum { common, input } => {
            no_resume(name, &common.resume)?;
            let c = curriculum(&input, &cfg.curriculum)?;
            for (epoch, sources) in c.schedule.iter().enumerate() {
                println!("epoch {epoch:>3}: {}", sources.join(", "));
            }
            let p = out.join("curriculum.json");
            write_json(&p, &c)?;
            vec![p]
        }
        Command::Pretrain { common, data, model } => {
            let d = load_data(&data, &cfg.curriculum)?;
            let vocab = d.tokenizer.vocab_size();
            let (spec, train) = match model.as_deref() {
                None => (&cfg.teachers[0].model, &cfg.teachers[0].train),
                Some("student") => (&cfg.student.model, &cfg.student.train),
                Some(n) => match cfg.teachers.iter().find(|t| t.name == n) {
                    Some(t) => (&t.model, &t.train),
                    None => bail!(UsageError(format!(
                        "--model {n:?}: expected student or one of {:?}",
                        cfg.teachers.iter().map(|t| &t.name).collect::<Vec<_>>()
                    ))),
                },
            };
            vec![train_model(&spec.resolve(vocab)?, train, &d.data, out, common.resume)?]
        }
        Command::Distill { common, data, teacher } => {
            let mut distill = cfg.distill.clone();
            if !teacher.is_empty() {
                distill.teachers = teacher;
            }
            preflight_teachers(&distill.teachers)?;
            let d = load_data(&data, &cfg.curriculum)?;
            let student = cfg.student.model.resolve(d.tokenizer.vocab_size())?;
            vec![distill_model(&student, &distill, &cfg.student.train, &d.data, out, common.resume)?]
        }
        Command::EvalPairs {
            common,
            checkpoint,
            tokenizer,
            pairs,
            ensemble,
        } => {
            no_resume(name, &common.resume)?;
            let tok = TokenizerModel::load(&tokenizer)?;
            let pairs = read_pairs(&pairs)?;
            let mut reports = BTreeMap::new();
            let mut members: Vec<Arc<dyn LanguageModel<f32>>> = Vec::new();
            for ck in &checkpoint {
                let m = load_model(ck)?;
                let acc = minimal_pair_accuracy(&m, &tok, &pairs, &cfg.eval)?;
                reports.insert(ck.display().to_string(), PairReport::new(&acc, Some(file_sha256(ck)?)));
                members.push(Arc::new(m));
            }
            if ensemble {
                let e = Ensemble::new(members, &cfg.distill.ensemble)?;
                let acc = minimal_pair_accuracy(&e, &tok, &pairs, &cfg.eval)?;
                reports.insert("ensemble".into(), PairReport::new(&acc, None));
            }
            let mut table = String::new();
            for (k, r) in &reports {
                table.push_str(&format!("== {k}\n{}\n", r.to_table()));
            }
            print!("{table}");
            let (pj, pt) = (out.join("report.json"), out.join("report.txt"));
            write_json(&pj, &reports)?;
            write_atomic(&pt, table.as_bytes())?;
            vec![pj, pt]
        }
        Command::Surprisal {
            common,
            checkpoint,
            tokenizer,
            corpus,
            word,
        } => {
            no_resume(name, &common.resume)?;
            let tok = TokenizerModel::load(&tokenizer)?;
            let m = load_model(&checkpoint)?;
            let text = read_text(&corpus)?;
            let mut records = Vec::with_capacity(word.len());
            for w in &word {
                let r = word_average_surprisal(&m, &tok, &text, w, cfg.eval.bos)?;
                println!("{:<20} {:>8.4} nats over {} contexts", r.word, r.mean_surprisal, r.n_contexts);
                records.push(r);
            }
            let p = out.join("surprisal.json");
            write_json(&p, &records)?;
            vec![p]
        }
        Command::Gap { common, checkpoint, data } => {
            no_resume(name, &common.resume)?;
            let d = load_data(&data, &CurriculumSettings::default())?;
            let tokens: Vec<u32> = d.data.train.iter().flat_map(|(_, ids)| ids.iter().copied()).collect();
            let ck = out.join("gap.ckpt");
            let report = gap_posttrain(&checkpoint, &tokens, &cfg.gap, &ck)?;
            let p = out.join("gap_report.json");
            write_json(&p, &report)?;
            vec![ck, p]
        }
        Command::Pipeline { .. } => unreachable!("handled above"),
    };
    manifest.finish(out, started, outputs)?;
    Ok(())
}

pub fn final_checkpoint(dir: &Path) -> PathBuf {
    dir.join(FINAL_CHECKPOINT)
}
