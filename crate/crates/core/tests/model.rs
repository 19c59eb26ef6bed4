use std::sync::Arc;

use kdlm_core::distillation::{KdObjective, KdWeights};
use kdlm_core::gradcheck::{check_gradients, DEFAULT_FLOOR, DEFAULT_STEP};
use kdlm_core::model::{init_weights_with_std, Family, LanguageModel, MoEConfig, Model, ModelConfig, ParamKind};
use kdlm_core::training::CrossEntropy;
use kdlm_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn desk(family: Family) -> ModelConfig {
    ModelConfig {
        family,
        n_layers: 2,
        n_heads: 2,
        hidden: 16,
        intermediate: 32,
        max_seq: 8,
        vocab: 11,
        tie_embeddings: family == Family::Gpt2Style,
        ..ModelConfig::preset("desk_student").unwrap()
    }
}

/// Weights in general position: larger than the training init, with
/// non-trivial gains and biases.
fn general_model(cfg: ModelConfig, seed: u64) -> Model<f64> {
    let mut params = init_weights_with_std::<f64>(&cfg, seed, 0.3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let kinds: Vec<ParamKind> = params.specs().iter().map(|s| s.kind).collect();
    for (t, kind) in params.tensors_mut().iter_mut().zip(kinds) {
        if kind != ParamKind::Weight {
            t.data.iter_mut().for_each(|v| *v += rng.random_range(-0.2..0.2));
        }
    }
    Model::new(cfg, params).unwrap()
}

fn tokens(n: usize, vocab: u32, seed: u64) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(0..vocab)).collect()
}

#[test]
fn cross_entropy_gradients_match_finite_differences() {
    for family in [Family::Gpt2Style, Family::LlamaStyle] {
        let model = general_model(desk(family), 1);
        let toks = tokens(16, 11, 2);
        let r = check_gradients(&model, &toks, 2, 8, &CrossEntropy { vocab: 11 }, DEFAULT_STEP, DEFAULT_FLOOR).unwrap();
        assert!(r.max_rel_error < 1e-4, "{family:?}: {r:?}");
        assert_eq!(r.checked as u64, kdlm_core::model::count_parameters(model.config()));
    }
}

#[test]
fn distillation_gradients_match_finite_differences() {
    for family in [Family::Gpt2Style, Family::LlamaStyle] {
        let model = general_model(desk(family), 3);
        let teachers: Vec<Arc<dyn LanguageModel<f64>>> = vec![
            Arc::new(general_model(desk(Family::Gpt2Style), 4)),
            Arc::new(general_model(desk(Family::LlamaStyle), 5)),
        ];
        let w = KdWeights {
            alpha: 0.5,
            temperature: 2.0,
            scale_kl_by_t2: true,
        };
        let objective = KdObjective::new(teachers, "logit_mean", w, 11).unwrap();
        let toks = tokens(16, 11, 6);
        let r = check_gradients(&model, &toks, 2, 8, &objective, DEFAULT_STEP, DEFAULT_FLOOR).unwrap();
        assert!(r.max_rel_error < 1e-4, "{family:?}: {r:?}");
    }
}

#[test]
fn mixture_of_experts_gradients_match_finite_differences() {
    let mut cfg = desk(Family::LlamaStyle);
    cfg.moe = Some(MoEConfig {
        n_experts: 3,
        capacity_factor: 1.0,
        aux_loss_coeff: 0.01,
    });
    let model = general_model(cfg, 7);
    let toks = tokens(16, 11, 8);
    let r = check_gradients(&model, &toks, 2, 8, &CrossEntropy { vocab: 11 }, DEFAULT_STEP, DEFAULT_FLOOR).unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}

#[test]
fn suffix_changes_never_reach_prefix_logits() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for family in [Family::Gpt2Style, Family::LlamaStyle] {
        let model = Model::<f32>::init(desk(family), 10).unwrap();
        for _ in 0..20 {
            let a = tokens(8, 11, rng.random());
            let t = rng.random_range(0..7usize);
            let mut b = a.clone();
            for v in &mut b[t + 1..] {
                *v = rng.random_range(0..11);
            }
            let la = model.logits(&a, 1, 8).unwrap();
            let lb = model.logits(&b, 1, 8).unwrap();
            assert_eq!(la[..(t + 1) * 11], lb[..(t + 1) * 11]);
        }
    }
}

#[test]
fn rows_shapes_and_determinism() {
    for family in [Family::Gpt2Style, Family::LlamaStyle] {
        let model = Model::<f32>::init(desk(family), 11).unwrap();
        let row = tokens(6, 11, 12);
        let both: Vec<u32> = row.iter().chain(&row).copied().collect();
        let l = model.logits(&both, 2, 6).unwrap();
        assert_eq!(l.len(), 2 * 6 * 11);
        assert_eq!(l[..66], l[66..]);
        assert_eq!(l, Model::<f32>::init(desk(family), 11).unwrap().logits(&both, 2, 6).unwrap());
        assert!(l.iter().all(|v| v.is_finite()));
        assert!(matches!(model.logits(&tokens(9, 11, 1), 1, 9), Err(Error::SequenceTooLong { .. })));
        assert!(matches!(model.logits(&[1, 11], 1, 2), Err(Error::TokenOutOfRange { id: 11, .. })));
        assert!(Model::<f32>::init(desk(family), 12).unwrap().logits(&both, 2, 6).unwrap() != l);
    }
}

/// With rotary angles at zero and norms removed, a one-layer model sees the
/// prefix of its last position as a bag of tokens: reordering the prefix
/// leaves that position's logits unchanged. With real angles it does not.
/// (Deeper stacks mix order into earlier positions' states first.)
#[test]
fn zero_angle_rotary_forgets_prefix_order() {
    let cfg = ModelConfig {
        n_layers: 1,
        ..desk(Family::LlamaStyle)
    };
    let mut flat = general_model(cfg.clone(), 13);
    flat.hooks.zero_rope = true;
    flat.hooks.identity_norm = true;
    let normal = general_model(cfg, 13);
    let a = vec![1u32, 4, 7, 2, 9, 3, 5, 6];
    let mut b = a.clone();
    b[..7].reverse();
    let last = |m: &Model<f64>, t: &[u32]| m.logits(t, 1, 8).unwrap()[7 * 11..].to_vec();
    let diff = |x: Vec<f64>, y: Vec<f64>| x.iter().zip(&y).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
    assert!(diff(last(&flat, &a), last(&flat, &b)) < 1e-12);
    assert!(diff(last(&normal, &a), last(&normal, &b)) > 1e-6);
}
