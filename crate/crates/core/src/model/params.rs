//! Parameter layout, initialization and counting.

use std::collections::HashMap;

use rand_distr::{Distribution, Normal};

use super::config::{Family, ModelConfig};
use crate::error::{Error, Result};
use crate::rng::{keyed, Purpose};
use crate::tensor::{Scalar, Tensor};

/// How a parameter is initialized and whether it is weight-decayed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Projection matrices and embedding tables: `N(0, 0.02)`.
    Weight,
    /// Norm gains: ones.
    Gain,
    /// Biases: zeros.
    Bias,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], kind: ParamKind) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            kind,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Every parameter the architecture instantiates, in a fixed order.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    use ParamKind::*;
    let (v, h, i, s) = (cfg.vocab, cfg.hidden, cfg.intermediate, cfg.max_seq);
    let mut out = Vec::new();
    let expert = |out: &mut Vec<ParamSpec>, prefix: &str| match cfg.family {
        Family::Gpt2Style => {
            out.push(ParamSpec::new(format!("{prefix}.fc.weight"), &[h, i], Weight));
            out.push(ParamSpec::new(format!("{prefix}.fc.bias"), &[i], Bias));
            out.push(ParamSpec::new(format!("{prefix}.proj.weight"), &[i, h], Weight));
            out.push(ParamSpec::new(format!("{prefix}.proj.bias"), &[h], Bias));
        }
        Family::LlamaStyle => {
            out.push(ParamSpec::new(format!("{prefix}.gate.weight"), &[h, i], Weight));
            out.push(ParamSpec::new(format!("{prefix}.up.weight"), &[h, i], Weight));
            out.push(ParamSpec::new(format!("{prefix}.down.weight"), &[i, h], Weight));
        }
    };
    let mlp = |out: &mut Vec<ParamSpec>, prefix: &str| match &cfg.moe {
        None => expert(out, prefix),
        Some(moe) => {
            out.push(ParamSpec::new(format!("{prefix}.router.weight"), &[h, moe.n_experts], Weight));
            for e in 0..moe.n_experts {
                expert(out, &format!("{prefix}.experts.{e}"));
            }
        }
    };
    match cfg.family {
        Family::Gpt2Style => {
            out.push(ParamSpec::new("wte", &[v, h], Weight));
            out.push(ParamSpec::new("wpe", &[s, h], Weight));
            for l in 0..cfg.n_layers {
                let p = format!("h.{l}");
                out.push(ParamSpec::new(format!("{p}.ln_1.weight"), &[h], Gain));
                out.push(ParamSpec::new(format!("{p}.ln_1.bias"), &[h], Bias));
                for m in ["q", "k", "v", "o"] {
                    out.push(ParamSpec::new(format!("{p}.attn.{m}.weight"), &[h, h], Weight));
                    out.push(ParamSpec::new(format!("{p}.attn.{m}.bias"), &[h], Bias));
                }
                out.push(ParamSpec::new(format!("{p}.ln_2.weight"), &[h], Gain));
                out.push(ParamSpec::new(format!("{p}.ln_2.bias"), &[h], Bias));
                mlp(&mut out, &format!("{p}.mlp"));
            }
            out.push(ParamSpec::new("ln_f.weight", &[h], Gain));
            out.push(ParamSpec::new("ln_f.bias", &[h], Bias));
        }
        Family::LlamaStyle => {
            out.push(ParamSpec::new("embed", &[v, h], Weight));
            for l in 0..cfg.n_layers {
                let p = format!("layers.{l}");
                out.push(ParamSpec::new(format!("{p}.attn_norm.weight"), &[h], Gain));
                for m in ["q", "k", "v", "o"] {
                    out.push(ParamSpec::new(format!("{p}.attn.{m}.weight"), &[h, h], Weight));
                }
                out.push(ParamSpec::new(format!("{p}.ffn_norm.weight"), &[h], Gain));
                mlp(&mut out, &format!("{p}.mlp"));
            }
            out.push(ParamSpec::new("norm.weight", &[h], Gain));
        }
    }
    if !cfg.tie_embeddings {
        out.push(ParamSpec::new("lm_head.weight", &[v, h], Weight));
    }
    out
}

/// Closed-form parameter count, written independently of [`param_specs`].
pub fn count_parameters(cfg: &ModelConfig) -> u64 {
    let (v, h, i, s, l) = (
        cfg.vocab as u64,
        cfg.hidden as u64,
        cfg.intermediate as u64,
        cfg.max_seq as u64,
        cfg.n_layers as u64,
    );
    let gpt2 = cfg.family == Family::Gpt2Style;
    let embeddings = v * h + if gpt2 { s * h } else { 0 };
    let head = if cfg.tie_embeddings { 0 } else { v * h };
    let attention = 4 * h * h + if gpt2 { 4 * h } else { 0 };
    let one_mlp = if gpt2 { 2 * h * i + i + h } else { 3 * h * i };
    let mlp = match &cfg.moe {
        None => one_mlp,
        Some(m) => m.n_experts as u64 * (one_mlp + h),
    };
    let layer_norms = if gpt2 { 4 * h } else { 2 * h };
    let final_norm = if gpt2 { 2 * h } else { h };
    embeddings + head + l * (attention + mlp + layer_norms) + final_norm
}

/// Named tensors shaped by a [`ModelConfig`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<S> {
    specs: Vec<ParamSpec>,
    tensors: Vec<Tensor<S>>,
    index: HashMap<String, usize>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn from_tensors(specs: Vec<ParamSpec>, tensors: Vec<Tensor<S>>) -> Result<Self> {
        if specs.len() != tensors.len() {
            return Err(Error::Shape(format!("{} specs but {} tensors", specs.len(), tensors.len())));
        }
        for (s, t) in specs.iter().zip(&tensors) {
            if s.shape != t.shape || t.data.len() != s.numel() {
                return Err(Error::Shape(format!("{}: expected {:?}, got {:?}", s.name, s.shape, t.shape)));
            }
        }
        let index = specs.iter().enumerate().map(|(i, s)| (s.name.clone(), i)).collect();
        Ok(Self { specs, tensors, index })
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn tensors(&self) -> &[Tensor<S>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<S>] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.index_of(name).map(move |i| &mut self.tensors[i])
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.tensors.iter().map(Tensor::numel).collect()
    }

    /// Total element count across all tensors.
    pub fn census(&self) -> u64 {
        self.tensors.iter().map(|t| t.numel() as u64).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            specs: self.specs.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Flattens every tensor into one vector, in spec order.
    pub fn flatten(&self) -> Vec<S> {
        self.tensors.iter().flat_map(|t| t.data.iter().copied()).collect()
    }
}

/// Standard deviation used for weight matrices and embeddings.
pub const INIT_STD: f64 = 0.02;

/// `N(0, 0.02)` weights, unit gains, zero biases; a pure function of `seed`.
pub fn init_weights<S: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<S>> {
    init_weights_with_std(cfg, seed, INIT_STD)
}

pub fn init_weights_with_std<S: Scalar>(cfg: &ModelConfig, seed: u64, std: f64) -> Result<ParamStore<S>> {
    cfg.validate()?;
    let specs = param_specs(cfg);
    let mut rng = keyed(seed, 0, Purpose::Init);
    let normal = Normal::new(0.0, std).map_err(|e| Error::config(e.to_string()))?;
    let tensors = specs
        .iter()
        .map(|spec| match spec.kind {
            ParamKind::Weight => Tensor {
                shape: spec.shape.clone(),
                data: (0..spec.numel()).map(|_| S::of(normal.sample(&mut rng))).collect(),
            },
            ParamKind::Gain => Tensor::filled(&spec.shape, S::one()),
            ParamKind::Bias => Tensor::zeros(&spec.shape),
        })
        .collect();
    ParamStore::from_tensors(specs, tensors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::MoEConfig;
    use proptest::prelude::*;

    #[test]
    fn zero_layer_tied_llama_is_embedding_plus_final_norm() {
        let cfg = ModelConfig {
            family: Family::LlamaStyle,
            n_layers: 0,
            n_heads: 2,
            hidden: 8,
            intermediate: 16,
            max_seq: 4,
            vocab: 100,
            tie_embeddings: true,
            norm_eps: 1e-5,
            rope_base: 10_000.0,
            moe: None,
        };
        assert_eq!(count_parameters(&cfg), 100 * 8 + 8);
        assert_eq!(init_weights::<f32>(&cfg, 0).unwrap().census(), 808);
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let cfg = ModelConfig::preset("desk_student").unwrap();
        let a = init_weights::<f32>(&cfg, 3).unwrap();
        let b = init_weights::<f32>(&cfg, 3).unwrap();
        let c = init_weights::<f32>(&cfg, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let weights: Vec<f32> = a
            .specs()
            .iter()
            .zip(a.tensors())
            .filter(|(s, _)| s.kind == ParamKind::Weight)
            .flat_map(|(_, t)| t.data.iter().copied())
            .collect();
        assert!(weights.len() > 100_000);
        // 0.02 std: |x| >= 1 is a 50-sigma event.
        assert!(weights.iter().all(|v| v.is_finite() && v.abs() < 1.0));
        assert_eq!(a.get("norm.weight").unwrap().data, vec![1.0; 64]);
    }

    #[test]
    fn init_statistics_match_target_std() {
        let cfg = ModelConfig::preset("desk_student").unwrap();
        let p = init_weights::<f64>(&cfg, 11).unwrap();
        let w = &p.get("embed").unwrap().data;
        let n = w.len() as f64;
        let mean = w.iter().sum::<f64>() / n;
        let std = (w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 1e-3, "mean {mean}");
        assert!((std - 0.02).abs() < 5e-4, "std {std}");
    }

    fn arb_config() -> impl Strategy<Value = ModelConfig> {
        (
            prop::bool::ANY,
            0usize..4,
            1usize..4,
            1usize..5,
            1usize..40,
            2usize..20,
            4usize..60,
            prop::bool::ANY,
            prop::option::of(1usize..4),
        )
            .prop_map(|(gpt2, layers, heads, hd, inter, seq, vocab, tie, experts)| ModelConfig {
                family: if gpt2 { Family::Gpt2Style } else { Family::LlamaStyle },
                n_layers: layers,
                n_heads: heads,
                hidden: heads * hd * 2,
                intermediate: inter,
                max_seq: seq,
                vocab,
                tie_embeddings: tie,
                norm_eps: 1e-5,
                rope_base: 10_000.0,
                moe: experts.map(|n| MoEConfig {
                    n_experts: n,
                    capacity_factor: 1.25,
                    aux_loss_coeff: 0.01,
                }),
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(50))]
        #[test]
        fn closed_form_count_matches_census(cfg in arb_config()) {
            let p = init_weights::<f32>(&cfg, 0).unwrap();
            prop_assert_eq!(count_parameters(&cfg), p.census());
        }
    }
}
