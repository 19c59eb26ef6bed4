use kdlm_core::dataloader::{chunk_stream, Split, TokenStream};
use kdlm_core::extensions::sam::SamConfig;
use kdlm_core::model::{Checkpoint, Family, LanguageModel, Model, ModelConfig};
use kdlm_core::training::{
    evaluate_loss, pretrain, CrossEntropy, RunOutput, ScheduleConfig, TrainConfig, Trainer, TrainingData, FINAL_CHECKPOINT, METRICS_FILE,
};
use kdlm_core::Error;

fn tiny(family: Family, vocab: usize) -> ModelConfig {
    ModelConfig {
        family,
        n_layers: 2,
        n_heads: 2,
        hidden: 32,
        intermediate: 64,
        max_seq: 16,
        vocab,
        tie_embeddings: family == Family::Gpt2Style,
        ..ModelConfig::preset("desk_student").unwrap()
    }
}

fn pattern(n: usize, vocab: u32, salt: u32) -> Vec<u32> {
    (0..n as u32).map(|i| (i * 7 + (i / 5) * 3 + salt) % vocab).collect()
}

fn config(epochs: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        batch: 4,
        chunk_len: 16,
        dev_chunks: 8,
        seed: 3,
        schedule: ScheduleConfig {
            warmup_steps: 4,
            ..ScheduleConfig::default()
        },
        optim: kdlm_core::training::OptimConfig {
            max_lr: 3e-3,
            ..Default::default()
        },
        ..TrainConfig::default()
    }
}

struct Uniform(usize);

impl LanguageModel<f32> for Uniform {
    fn vocab_size(&self) -> usize {
        self.0
    }
    fn max_seq(&self) -> usize {
        64
    }
    fn logits(&self, tokens: &[u32], _b: usize, _s: usize) -> kdlm_core::Result<Vec<f32>> {
        Ok(vec![0.0; tokens.len() * self.0])
    }
}

#[test]
fn uniform_model_loss_is_ln_vocab() {
    let stream = TokenStream::new(pattern(640, 37, 0), Split::Dev);
    let chunks = chunk_stream(&stream, 16, 0).unwrap();
    let loss = evaluate_loss(&Uniform(37), &chunks, 3).unwrap();
    assert_eq!(loss, (37f64).ln());
    assert!(matches!(evaluate_loss(&Uniform(37), &[], 3), Err(Error::Config(_))));
}

#[test]
fn init_loss_is_near_ln_vocab() {
    for family in [Family::Gpt2Style, Family::LlamaStyle] {
        let model = Model::<f32>::init(tiny(family, 200), 1).unwrap();
        let stream = TokenStream::new(pattern(16 * 32, 200, 5), Split::Dev);
        let chunks = chunk_stream(&stream, 16, 0).unwrap();
        let loss = evaluate_loss(&model, &chunks, 8).unwrap();
        let rel = (loss - 200f64.ln()).abs() / 200f64.ln();
        assert!(rel < 0.01, "{family:?}: {loss}");
        assert_eq!(loss, evaluate_loss(&model, &chunks, 8).unwrap());
        let shuffled: Vec<_> = chunks.iter().rev().cloned().collect();
        assert_eq!(loss, evaluate_loss(&model, &shuffled, 5).unwrap());
    }
}

#[test]
fn desk_run_descends_and_is_reproducible() {
    let data = TrainingData::single(pattern(16 * 48, 50, 0), pattern(16 * 8, 50, 1));
    let cfg = config(2);
    let a = pretrain(&tiny(Family::LlamaStyle, 50), &cfg, &data, &RunOutput::default()).unwrap();
    let b = pretrain(&tiny(Family::LlamaStyle, 50), &cfg, &data, &RunOutput::default()).unwrap();
    assert_eq!(a.history, b.history);
    let first = a.history[0].first_train_loss;
    let last = a.history[1].last_train_loss;
    assert!(last < first, "{first} -> {last}");
    assert!(a.history.iter().all(|h| h.dev_loss.is_some()));
}

#[test]
fn resume_matches_an_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let data = TrainingData::single(pattern(16 * 24, 40, 0), pattern(16 * 4, 40, 2));
    let model_cfg = tiny(Family::Gpt2Style, 40);
    let full = pretrain(&model_cfg, &config(3), &data, &RunOutput::default()).unwrap();

    let first = pretrain(&model_cfg, &config(1), &data, &RunOutput { dir: Some(dir.path().into()), resume: None }).unwrap();
    assert_eq!(first.final_path, Some(dir.path().join(FINAL_CHECKPOINT)));
    assert!(dir.path().join("epoch-000.ckpt").is_file());
    // The schedule must cover the full run, so the short run is only used
    // for its epoch-0 checkpoint when both runs share total_steps.
    let mut cfg3 = config(3);
    cfg3.schedule.total_steps = kdlm_core::training::planned_steps(&cfg3, &data);
    let full_fixed = pretrain(&model_cfg, &cfg3, &data, &RunOutput::default()).unwrap();
    assert_eq!(full.history, full_fixed.history);
    let mut cfg1 = config(1);
    cfg1.schedule.total_steps = cfg3.schedule.total_steps;
    let d2 = tempfile::tempdir().unwrap();
    pretrain(&model_cfg, &cfg1, &data, &RunOutput { dir: Some(d2.path().into()), resume: None }).unwrap();
    let resumed = pretrain(
        &model_cfg,
        &cfg3,
        &data,
        &RunOutput {
            dir: None,
            resume: Some(d2.path().join(FINAL_CHECKPOINT)),
        },
    )
    .unwrap();
    assert_eq!(resumed.history, full.history);
    assert_eq!(resumed.checkpoint.tensors, full.checkpoint.tensors);
}

#[test]
fn checkpoint_round_trip_keeps_dev_loss_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let data = TrainingData::single(pattern(16 * 16, 30, 0), pattern(16 * 4, 30, 2));
    let out = pretrain(&tiny(Family::LlamaStyle, 30), &config(1), &data, &RunOutput { dir: Some(dir.path().into()), resume: None }).unwrap();
    let dev = chunk_stream(&TokenStream::new(data.dev.clone(), Split::Dev), 16, 0).unwrap();
    let before: Model<f32> = out.checkpoint.to_model().unwrap();
    let after: Model<f32> = Checkpoint::load(&out.final_path.unwrap()).unwrap().to_model().unwrap();
    assert_eq!(evaluate_loss(&before, &dev, 4).unwrap(), evaluate_loss(&after, &dev, 2).unwrap());
}

#[test]
fn sam_with_zero_radius_equals_the_base_optimizer() {
    let data = TrainingData::single(pattern(16 * 16, 30, 0), pattern(16 * 4, 30, 2));
    let model = Model::<f32>::init(tiny(Family::LlamaStyle, 30), 9).unwrap();
    let cfg = config(1);
    let objective = CrossEntropy { vocab: 30 };
    let mut plain = Trainer::new(model.clone(), cfg.clone(), &data).unwrap();
    let mut sam = Trainer::new(model, cfg, &data).unwrap();
    let a = plain.train_epoch(&data, &objective, None, &mut |_| Ok(())).unwrap();
    let b = sam.train_epoch(&data, &objective, Some(0.0), &mut |_| Ok(())).unwrap();
    assert_eq!(a.mean_train_loss, b.mean_train_loss);
    assert_eq!(plain.model().params(), sam.model().params());
}

#[test]
fn sam_epochs_follow_regular_epochs() {
    let data = TrainingData::single(pattern(16 * 16, 30, 0), pattern(16 * 4, 30, 2));
    let mut cfg = config(1);
    cfg.sam = Some(SamConfig::default());
    let out = pretrain(&tiny(Family::Gpt2Style, 30), &cfg, &data, &RunOutput::default()).unwrap();
    assert_eq!(out.history.iter().map(|h| h.sam).collect::<Vec<_>>(), vec![false, true]);
}

#[test]
fn divergence_names_the_step() {
    let data = TrainingData::single(pattern(16 * 16, 30, 0), pattern(16 * 4, 30, 2));
    let mut cfg = config(1);
    cfg.optim.max_lr = 1e30;
    cfg.optim.grad_clip = None;
    cfg.schedule.warmup_steps = 0;
    match pretrain(&tiny(Family::Gpt2Style, 30), &cfg, &data, &RunOutput::default()) {
        Err(Error::Divergence { step, .. }) => assert!(step >= 1),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn rejects_chunks_longer_than_the_context() {
    let data = TrainingData::single(pattern(64 * 4, 30, 0), pattern(64 * 2, 30, 2));
    let mut cfg = config(1);
    cfg.chunk_len = 64;
    assert!(matches!(pretrain(&tiny(Family::Gpt2Style, 30), &cfg, &data, &RunOutput::default()), Err(Error::Config(_))));
}

#[test]
fn memorizes_a_tiny_corpus() {
    let sentences = [
        "the cat sat on the mat.",
        "a dog ran in the park.",
        "birds sing every morning.",
        "my friend reads books.",
        "we eat bread and jam.",
        "the sun is very hot.",
        "she plays the violin.",
        "rain fell all night.",
        "old ships sail slowly.",
        "kids jump over puddles.",
    ];
    let ids: Vec<u32> = sentences.join(" ").bytes().map(|b| b as u32).collect();
    let mut model_cfg = tiny(Family::LlamaStyle, 128);
    model_cfg.hidden = 64;
    model_cfg.intermediate = 128;
    model_cfg.max_seq = 32;
    let cfg = TrainConfig {
        epochs: 50,
        batch: 1,
        chunk_len: 32,
        dev_chunks: 16,
        seed: 1,
        schedule: ScheduleConfig {
            warmup_steps: 10,
            ..ScheduleConfig::default()
        },
        optim: kdlm_core::training::OptimConfig {
            max_lr: 3e-3,
            weight_decay: 0.0,
            ..Default::default()
        },
        ..TrainConfig::default()
    };
    let data = TrainingData::single(ids.clone(), ids.clone());
    let out = pretrain(&model_cfg, &cfg, &data, &RunOutput::default()).unwrap();
    let dev = out.history.last().unwrap().dev_loss.unwrap();
    assert!(dev < 0.1, "dev loss after memorization {dev}");
    let model: Model<f32> = out.checkpoint.to_model().unwrap();
    let chunks = chunk_stream(&TokenStream::new(ids, Split::Dev), 32, 0).unwrap();
    let ppl = kdlm_core::training::evaluate_loss(&model, &chunks, 4).unwrap().exp();
    assert!(ppl < 1.2, "perplexity {ppl}");
}

#[test]
fn metrics_are_not_duplicated_by_reruns_or_resume() {
    let read = |p: &std::path::Path| std::fs::read_to_string(p).unwrap();
    let data = TrainingData::single(pattern(16 * 24, 40, 0), pattern(16 * 4, 40, 2));
    let model_cfg = tiny(Family::LlamaStyle, 40);
    let mut cfg = config(2);
    cfg.schedule.total_steps = kdlm_core::training::planned_steps(&cfg, &data);

    let whole = tempfile::tempdir().unwrap();
    let out = RunOutput { dir: Some(whole.path().into()), resume: None };
    pretrain(&model_cfg, &cfg, &data, &out).unwrap();
    let once = read(&whole.path().join(METRICS_FILE));
    pretrain(&model_cfg, &cfg, &data, &out).unwrap();
    assert_eq!(read(&whole.path().join(METRICS_FILE)), once);

    let split = tempfile::tempdir().unwrap();
    let mut first = cfg.clone();
    first.epochs = 1;
    pretrain(&model_cfg, &first, &data, &RunOutput { dir: Some(split.path().into()), resume: None }).unwrap();
    let resume = Some(split.path().join("epoch-000.ckpt"));
    pretrain(&model_cfg, &cfg, &data, &RunOutput { dir: Some(split.path().into()), resume }).unwrap();
    let lines = |s: &str| s.lines().filter(|l| l.contains("\"step\"")).count();
    assert_eq!(lines(&read(&split.path().join(METRICS_FILE))), lines(&once));
}
