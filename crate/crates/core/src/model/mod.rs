//! Decoder-only transformers in two families (GPT-2-style and LLaMA-style).

pub mod arch;
pub mod checkpoint;
pub mod config;
pub mod layers;
pub mod params;

use std::collections::HashMap;
use std::sync::Arc;

pub use arch::{architectures, Architecture, ForwardHooks, ForwardOutput};
pub use checkpoint::Checkpoint;
pub use config::{Family, MoEConfig, ModelConfig};
pub use params::{count_parameters, init_weights, init_weights_with_std, param_specs, ParamKind, ParamSpec, ParamStore};

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::tensor::Scalar;
use layers::BoundParams;

/// Anything that maps `[batch, seq]` token ids to `[batch*seq, vocab]` logits.
pub trait LanguageModel<S: Scalar>: Send + Sync {
    fn vocab_size(&self) -> usize;
    fn max_seq(&self) -> usize;
    fn logits(&self, tokens: &[u32], batch: usize, seq: usize) -> Result<Vec<S>>;
}

/// A configured architecture together with its parameters.
pub struct Model<S: Scalar> {
    config: ModelConfig,
    params: ParamStore<S>,
    arch: Arc<dyn Architecture<S>>,
    pub hooks: ForwardHooks,
}

impl<S: Scalar> Clone for Model<S> {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: self.params.clone(),
            arch: Arc::clone(&self.arch),
            hooks: self.hooks,
        }
    }
}

impl<S: Scalar> std::fmt::Debug for Model<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model")
            .field("config", &self.config)
            .field("parameters", &self.params.census())
            .finish()
    }
}

impl<S: Scalar> Model<S> {
    pub fn new(config: ModelConfig, params: ParamStore<S>) -> Result<Self> {
        config.validate()?;
        let expected = param_specs(&config);
        if expected.len() != params.len() || expected.iter().zip(params.specs()).any(|(a, b)| a.name != b.name || a.shape != b.shape) {
            return Err(Error::Shape("parameter layout does not match the model config".into()));
        }
        let arch: Arc<dyn Architecture<S>> = Arc::from(architectures::<S>().create(config.family.name(), &())?);
        Ok(Self {
            config,
            params,
            arch,
            hooks: ForwardHooks::default(),
        })
    }

    /// Freshly initialized model; see [`init_weights`].
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = init_weights(&config, seed)?;
        Self::new(config, params)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore<S> {
        self.params
    }

    pub fn cast<T: Scalar>(&self) -> Model<T> {
        let mut m = Model::new(self.config.clone(), self.params.cast()).expect("same layout");
        m.hooks = self.hooks;
        m
    }

    fn check_tokens(&self, tokens: &[u32], batch: usize, seq: usize) -> Result<Vec<usize>> {
        if seq == 0 || batch == 0 || tokens.len() != batch * seq {
            return Err(Error::Shape(format!("{} tokens for batch {batch} x seq {seq}", tokens.len())));
        }
        if seq > self.config.max_seq {
            return Err(Error::SequenceTooLong {
                len: seq,
                max_seq: self.config.max_seq,
            });
        }
        tokens
            .iter()
            .map(|&t| {
                if (t as usize) < self.config.vocab {
                    Ok(t as usize)
                } else {
                    Err(Error::TokenOutOfRange {
                        id: t,
                        vocab: self.config.vocab,
                    })
                }
            })
            .collect()
    }

    /// Records the forward pass on `g`.
    pub fn forward(&self, g: &mut Graph<S>, tokens: &[u32], batch: usize, seq: usize) -> Result<ForwardOutput<S>> {
        self.forward_with(&self.params, g, tokens, batch, seq)
    }

    /// Forward pass using `params` in place of the model's own weights.
    /// `params` must share the model's layout.
    pub fn forward_with(&self, params: &ParamStore<S>, g: &mut Graph<S>, tokens: &[u32], batch: usize, seq: usize) -> Result<ForwardOutput<S>> {
        if params.sizes() != self.params.sizes() {
            return Err(Error::Shape("parameter store does not match the model layout".into()));
        }
        let ids = self.check_tokens(tokens, batch, seq)?;
        let mut bound = HashMap::with_capacity(params.len());
        for (i, (spec, t)) in params.specs().iter().zip(params.tensors()).enumerate() {
            let (r, c) = t.matrix_dims();
            bound.insert(spec.name.clone(), g.param(i, r, c, t.data.clone()));
        }
        let bound = BoundParams::new(bound);
        let ctx = arch::ForwardCtx {
            cfg: &self.config,
            params: &bound,
            batch,
            seq,
            hooks: self.hooks,
        };
        self.arch.forward(g, &ctx, &ids)
    }

    /// Runs forward, hands the logits to `loss`, and back-propagates the
    /// returned logit gradient (plus any auxiliary-loss seeds).
    ///
    /// `loss` returns `(value, d value / d logits)`.
    pub fn loss_and_grads<L, F>(&self, tokens: &[u32], batch: usize, seq: usize, loss: F) -> Result<(L, f64, Vec<Vec<S>>)>
    where
        F: FnOnce(&[S]) -> Result<(L, Vec<S>)>,
    {
        self.loss_and_grads_with(&self.params, tokens, batch, seq, loss)
    }

    pub fn loss_and_grads_with<L, F>(&self, params: &ParamStore<S>, tokens: &[u32], batch: usize, seq: usize, loss: F) -> Result<(L, f64, Vec<Vec<S>>)>
    where
        F: FnOnce(&[S]) -> Result<(L, Vec<S>)>,
    {
        let mut g = Graph::new();
        let out = self.forward_with(params, &mut g, tokens, batch, seq)?;
        let (value, dlogits) = loss(g.value(out.logits))?;
        let mut seeds = Vec::with_capacity(1 + out.aux_seeds.len());
        seeds.push((out.logits, dlogits));
        seeds.extend(out.aux_seeds);
        let grads = g.backward(&seeds);
        Ok((value, out.aux_loss, grads.into_param_grads(&self.params.sizes())))
    }
}

impl<S: Scalar> LanguageModel<S> for Model<S> {
    fn vocab_size(&self) -> usize {
        self.config.vocab
    }

    fn max_seq(&self) -> usize {
        self.config.max_seq
    }

    fn logits(&self, tokens: &[u32], batch: usize, seq: usize) -> Result<Vec<S>> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, tokens, batch, seq)?;
        Ok(g.value(out.logits).to_vec())
    }
}
