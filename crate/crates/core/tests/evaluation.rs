use std::sync::Arc;

use kdlm_core::dataloader::generate_synthetic_corpus;
use kdlm_core::distillation::Ensemble;
use kdlm_core::evaluation::{
    minimal_pair_accuracy, perplexity, score_pairs, sequence_logprob, sequence_logprob_ids, token_logprobs, word_average_surprisal, MinimalPair,
    ScoreOptions,
};
use kdlm_core::dataloader::{chunk_stream, Split, TokenStream};
use kdlm_core::model::{Family, LanguageModel, Model, ModelConfig};
use kdlm_core::tokenizer::{train_bpe, TokenizerModel};
use kdlm_core::Error;

struct Uniform(usize);

impl LanguageModel<f64> for Uniform {
    fn vocab_size(&self) -> usize {
        self.0
    }
    fn max_seq(&self) -> usize {
        64
    }
    fn logits(&self, _: &[u32], batch: usize, seq: usize) -> kdlm_core::Result<Vec<f64>> {
        Ok(vec![0.25; batch * seq * self.0])
    }
}

/// Next-token logits depend only on the current token.
struct Bigram(usize);

impl Bigram {
    fn logit(i: u32, j: usize) -> f64 {
        ((i as usize * 31 + j * 17) % 13) as f64 / 4.0
    }

    fn prob(&self, i: u32, j: u32) -> f64 {
        let z: f64 = (0..self.0).map(|k| Self::logit(i, k).exp()).sum();
        Self::logit(i, j as usize).exp() / z
    }
}

impl LanguageModel<f64> for Bigram {
    fn vocab_size(&self) -> usize {
        self.0
    }
    fn max_seq(&self) -> usize {
        64
    }
    fn logits(&self, tokens: &[u32], _: usize, _: usize) -> kdlm_core::Result<Vec<f64>> {
        Ok(tokens.iter().flat_map(|&t| (0..self.0).map(move |j| Self::logit(t, j))).collect())
    }
}

/// Adds a constant to every output logit, as a shifted head bias would.
struct Shifted<M>(M, f32);

impl<M: LanguageModel<f32>> LanguageModel<f32> for Shifted<M> {
    fn vocab_size(&self) -> usize {
        self.0.vocab_size()
    }
    fn max_seq(&self) -> usize {
        self.0.max_seq()
    }
    fn logits(&self, tokens: &[u32], batch: usize, seq: usize) -> kdlm_core::Result<Vec<f32>> {
        Ok(self.0.logits(tokens, batch, seq)?.into_iter().map(|x| x + self.1).collect())
    }
}

fn toy(family: Family) -> Model<f64> {
    let cfg = ModelConfig {
        family,
        n_layers: 2,
        n_heads: 2,
        hidden: 8,
        intermediate: 16,
        max_seq: 3,
        vocab: 5,
        tie_embeddings: family == Family::Gpt2Style,
        ..ModelConfig::preset("desk_student").unwrap()
    };
    let mut m = Model::<f64>::init(cfg, 17).unwrap();
    // Sharpen the output so the conditionals are far from uniform.
    for t in m.params_mut().tensors_mut() {
        t.data.iter_mut().for_each(|x| *x *= 20.0);
    }
    m
}

fn softmax_row(logits: &[f64], row: usize, v: usize) -> Vec<f64> {
    let r = &logits[row * v..(row + 1) * v];
    let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = r.iter().map(|x| (x - m).exp()).sum();
    r.iter().map(|x| (x - m).exp() / z).collect()
}

#[test]
fn uniform_model_scores_minus_k_minus_one_ln_v() {
    for k in 2..10 {
        let ids: Vec<u32> = (0..k as u32).map(|i| i % 7).collect();
        let lp = sequence_logprob_ids(&Uniform(7), &ids).unwrap();
        assert!((lp + (k - 1) as f64 * 7f64.ln()).abs() < 1e-12);
    }
    assert!(matches!(sequence_logprob_ids(&Uniform(7), &[1]), Err(Error::Degenerate(_))));
    let long = vec![1u32; 65];
    assert!(matches!(sequence_logprob_ids(&Uniform(7), &long), Err(Error::SequenceTooLong { .. })));
}

#[test]
fn chain_rule_enumeration_on_a_vocab_five_model() {
    for family in [Family::Gpt2Style, Family::LlamaStyle] {
        let m = toy(family);
        for t0 in 0..5u32 {
            let p1 = softmax_row(&m.logits(&[t0], 1, 1).unwrap(), 0, 5);
            let mut mass = 0.0;
            for t1 in 0..5u32 {
                let p2 = softmax_row(&m.logits(&[t0, t1], 1, 2).unwrap(), 1, 5);
                for t2 in 0..5u32 {
                    let explicit = p1[t1 as usize] * p2[t2 as usize];
                    let lp = sequence_logprob_ids(&m, &[t0, t1, t2]).unwrap();
                    assert!((lp - explicit.ln()).abs() < 1e-8, "{family:?} {t0}{t1}{t2}");
                    mass += lp.exp();
                }
            }
            assert!((mass - 1.0).abs() < 1e-10);
        }
    }
}

#[test]
fn appending_never_increases_logprob() {
    let m = toy(Family::LlamaStyle);
    for a in 0..5u32 {
        for b in 0..5u32 {
            let two = sequence_logprob_ids(&m, &[a, b]).unwrap();
            for c in 0..5u32 {
                assert!(sequence_logprob_ids(&m, &[a, b, c]).unwrap() <= two);
            }
            assert!(token_logprobs(&m, &[a, b]).unwrap().iter().all(|&x| x <= 0.0));
        }
    }
}

fn synthetic_setup() -> (TokenizerModel, Vec<MinimalPair>, Model<f32>) {
    let corpus = generate_synthetic_corpus(7, 2000).unwrap();
    let tok = train_bpe([corpus.train.as_str()], 600).unwrap();
    let cfg = ModelConfig {
        vocab: tok.vocab_size(),
        max_seq: 64,
        ..ModelConfig::preset("desk_student").unwrap()
    };
    (tok, corpus.pairs, Model::<f32>::init(cfg, 1).unwrap())
}

#[test]
fn random_init_accuracy_is_near_chance() {
    let (tok, pairs, model) = synthetic_setup();
    assert_eq!(pairs.len(), 400);
    let acc = minimal_pair_accuracy(&model, &tok, &pairs, &ScoreOptions::default()).unwrap();
    let pct = acc.overall.percent();
    assert!((45.0..=55.0).contains(&pct), "accuracy {pct}");
    assert_eq!(acc.phenomena.values().map(|t| t.total).sum::<usize>(), 400);
}

#[test]
fn scoring_is_batch_order_and_shift_invariant() {
    let (tok, pairs, model) = synthetic_setup();
    let pairs = &pairs[..60];
    let one = ScoreOptions { threads: 1, ..Default::default() };
    let many = ScoreOptions { threads: 7, ..Default::default() };
    let a = score_pairs(&model, &tok, pairs, &one).unwrap();
    let b = score_pairs(&model, &tok, pairs, &many).unwrap();
    assert_eq!(a, b);
    for (p, s) in pairs.iter().zip(&a).step_by(7) {
        assert_eq!(score_pairs(&model, &tok, std::slice::from_ref(p), &one).unwrap()[0], *s);
    }

    let base = minimal_pair_accuracy(&model, &tok, pairs, &one).unwrap();
    let mut shuffled = pairs.to_vec();
    shuffled.reverse();
    shuffled.rotate_left(17);
    assert_eq!(minimal_pair_accuracy(&model, &tok, &shuffled, &many).unwrap(), base);

    let shifted = Shifted(model.clone(), 3.5);
    assert_eq!(minimal_pair_accuracy(&shifted, &tok, pairs, &one).unwrap(), base);

    assert!(matches!(minimal_pair_accuracy(&model, &tok, &[], &one), Err(Error::Degenerate(_))));
}

#[test]
fn identical_teacher_ensemble_scores_like_one_model() {
    let (tok, pairs, model) = synthetic_setup();
    let shared: Arc<dyn LanguageModel<f32>> = Arc::new(model.clone());
    let ens = Ensemble::new(vec![shared.clone(), shared.clone(), shared], "logit_mean").unwrap();
    for p in pairs.iter().take(20) {
        let single = sequence_logprob(&model, &tok, &p.good, false).unwrap();
        assert_eq!(sequence_logprob(&ens, &tok, &p.good, false).unwrap().to_bits(), single.to_bits());
    }
}

#[test]
fn surprisal_matches_hand_values() {
    let tok = TokenizerModel::base();
    let m = Bigram(tok.vocab_size());
    let id = |c: u8| c as u32 + 4;
    let occurrence = |ctx: u8| -> f64 { -(m.prob(id(ctx), id(b' ')).ln() + m.prob(id(b' '), id(b'a')).ln() + m.prob(id(b'a'), id(b'b')).ln()) };
    let (s1, s2) = (occurrence(b'x'), occurrence(b'y'));

    let two = word_average_surprisal(&m, &tok, "x ab\ny ab.\n", "ab", false).unwrap();
    assert_eq!(two.n_contexts, 2);
    assert!((two.mean_surprisal - (s1 + s2) / 2.0).abs() < 1e-12);

    let one = word_average_surprisal(&m, &tok, "x ab\n", "ab", false).unwrap();
    assert!((one.mean_surprisal - s1).abs() < 1e-12);

    match word_average_surprisal(&m, &tok, "x ab\n", "abc", false) {
        Err(Error::WordNotFound { suggestions, .. }) => assert_eq!(suggestions[0], "ab"),
        other => panic!("expected WordNotFound, got {other:?}"),
    }
    assert!(matches!(word_average_surprisal(&m, &tok, "ab x\n", "ab", false), Err(Error::Degenerate(_))));
    assert_eq!(word_average_surprisal(&m, &tok, "ab x\n", "ab", true).unwrap().n_contexts, 1);
}

#[test]
fn uniform_single_token_word_costs_ln_v() {
    let tok = train_bpe(["x a x a"], 261).unwrap();
    assert_eq!(tok.encode(" a").len(), 1);
    let v = tok.vocab_size();
    let r = word_average_surprisal(&Uniform(v), &tok, "x a\nz x a x\n", "a", false).unwrap();
    assert_eq!(r.n_contexts, 2);
    assert!((r.mean_surprisal - (v as f64).ln()).abs() < 1e-12);
}

#[test]
fn uniform_perplexity_is_the_vocab_size() {
    let ids: Vec<u32> = (0..640u32).map(|i| (i * 13) % 37).collect();
    let chunks = chunk_stream(&TokenStream::new(ids, Split::Dev), 16, 0).unwrap();
    let ppl = perplexity(&Uniform(37), &chunks, 4).unwrap();
    assert!((ppl - 37.0).abs() < 1e-10);
}
