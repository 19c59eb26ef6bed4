//! Decoder families behind a common trait, registered by family name.

use super::config::{Family, ModelConfig};
use super::layers::{self_attention, AttentionWeights, BoundParams, Expert, Rotary};
use crate::autograd::{Graph, NodeId};
use crate::error::Result;
use crate::extensions::moe::{switch_layer, SwitchStats};
use crate::registry::Registry;
use crate::tensor::Scalar;

/// Test hooks that switch off parts of the forward pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ForwardHooks {
    /// Rotary angles forced to zero (rotation becomes identity).
    pub zero_rope: bool,
    /// Every norm layer replaced by the identity.
    pub identity_norm: bool,
}

pub struct ForwardCtx<'a> {
    pub cfg: &'a ModelConfig,
    pub params: &'a BoundParams,
    pub batch: usize,
    pub seq: usize,
    pub hooks: ForwardHooks,
}

/// Output of a forward pass: the logits node plus any auxiliary-loss seeds
/// (mixture-of-experts load balancing) that the caller adds to `backward`.
pub struct ForwardOutput<S> {
    pub logits: NodeId,
    pub aux_loss: f64,
    pub aux_seeds: Vec<(NodeId, Vec<S>)>,
    pub moe: Vec<SwitchStats>,
}

pub trait Architecture<S: Scalar>: Send + Sync {
    fn family(&self) -> Family;

    /// Builds `[batch*seq, vocab]` logits for the given token ids.
    fn forward(&self, g: &mut Graph<S>, ctx: &ForwardCtx<'_>, tokens: &[usize]) -> Result<ForwardOutput<S>>;
}

pub fn architectures<S: Scalar>() -> Registry<dyn Architecture<S>> {
    let mut reg: Registry<dyn Architecture<S>> = Registry::new("model family");
    reg.register(Family::Gpt2Style.name(), |_| Ok(Box::new(Gpt2Style)));
    reg.register(Family::LlamaStyle.name(), |_| Ok(Box::new(LlamaStyle)));
    reg
}

struct Accum<S> {
    aux_loss: f64,
    aux_seeds: Vec<(NodeId, Vec<S>)>,
    moe: Vec<SwitchStats>,
}

fn feed_forward<S: Scalar>(
    g: &mut Graph<S>,
    ctx: &ForwardCtx<'_>,
    x: NodeId,
    prefix: &str,
    bind: fn(&BoundParams, &str) -> Result<Expert>,
    acc: &mut Accum<S>,
) -> Result<NodeId> {
    match &ctx.cfg.moe {
        None => Ok(bind(ctx.params, prefix)?.forward(g, x)),
        Some(moe) => {
            let router = ctx.params.get(&format!("{prefix}.router.weight"))?;
            let experts = (0..moe.n_experts)
                .map(|e| bind(ctx.params, &format!("{prefix}.experts.{e}")))
                .collect::<Result<Vec<_>>>()?;
            let out = switch_layer(g, x, router, &experts, moe);
            acc.aux_loss += out.aux_loss;
            acc.aux_seeds.push(out.aux_seed);
            acc.moe.push(out.stats);
            Ok(out.output)
        }
    }
}

struct Gpt2Style;

impl<S: Scalar> Architecture<S> for Gpt2Style {
    fn family(&self) -> Family {
        Family::Gpt2Style
    }

    fn forward(&self, g: &mut Graph<S>, ctx: &ForwardCtx<'_>, tokens: &[usize]) -> Result<ForwardOutput<S>> {
        let cfg = ctx.cfg;
        let p = ctx.params;
        let eps = cfg.norm_eps;
        let norm = |g: &mut Graph<S>, x: NodeId, name: &str| -> Result<NodeId> {
            if ctx.hooks.identity_norm {
                return Ok(x);
            }
            let w = p.get(&format!("{name}.weight"))?;
            let b = p.get(&format!("{name}.bias"))?;
            Ok(g.layer_norm(x, w, b, eps))
        };
        let wte = p.get("wte")?;
        let tok = g.gather(wte, tokens.to_vec());
        let positions: Vec<usize> = (0..tokens.len()).map(|r| r % ctx.seq).collect();
        let pos = g.gather(p.get("wpe")?, positions);
        let mut h = g.add(tok, pos);
        let mut acc = Accum {
            aux_loss: 0.0,
            aux_seeds: Vec::new(),
            moe: Vec::new(),
        };
        for l in 0..cfg.n_layers {
            let pre = format!("h.{l}");
            let a = norm(g, h, &format!("{pre}.ln_1"))?;
            let w = AttentionWeights::bind(p, &format!("{pre}.attn"), true)?;
            let att = self_attention(g, a, &w, ctx.batch, ctx.seq, cfg.n_heads, None);
            h = g.add(h, att);
            let m = norm(g, h, &format!("{pre}.ln_2"))?;
            let ff = feed_forward(g, ctx, m, &format!("{pre}.mlp"), Expert::bind_gelu, &mut acc)?;
            h = g.add(h, ff);
        }
        let hf = norm(g, h, "ln_f")?;
        let head = if cfg.tie_embeddings { wte } else { p.get("lm_head.weight")? };
        let logits = g.matmul_t(hf, head);
        Ok(ForwardOutput {
            logits,
            aux_loss: acc.aux_loss,
            aux_seeds: acc.aux_seeds,
            moe: acc.moe,
        })
    }
}

struct LlamaStyle;

impl<S: Scalar> Architecture<S> for LlamaStyle {
    fn family(&self) -> Family {
        Family::LlamaStyle
    }

    fn forward(&self, g: &mut Graph<S>, ctx: &ForwardCtx<'_>, tokens: &[usize]) -> Result<ForwardOutput<S>> {
        let cfg = ctx.cfg;
        let p = ctx.params;
        let eps = cfg.norm_eps;
        let norm = |g: &mut Graph<S>, x: NodeId, name: &str| -> Result<NodeId> {
            if ctx.hooks.identity_norm {
                return Ok(x);
            }
            Ok(g.rms_norm(x, p.get(name)?, eps))
        };
        let embed = p.get("embed")?;
        let mut h = g.gather(embed, tokens.to_vec());
        let rotary = Rotary {
            base: cfg.rope_base,
            zero_angles: ctx.hooks.zero_rope,
        };
        let mut acc = Accum {
            aux_loss: 0.0,
            aux_seeds: Vec::new(),
            moe: Vec::new(),
        };
        for l in 0..cfg.n_layers {
            let pre = format!("layers.{l}");
            let a = norm(g, h, &format!("{pre}.attn_norm.weight"))?;
            let w = AttentionWeights::bind(p, &format!("{pre}.attn"), false)?;
            let att = self_attention(g, a, &w, ctx.batch, ctx.seq, cfg.n_heads, Some(rotary));
            h = g.add(h, att);
            let m = norm(g, h, &format!("{pre}.ffn_norm.weight"))?;
            let ff = feed_forward(g, ctx, m, &format!("{pre}.mlp"), Expert::bind_swiglu, &mut acc)?;
            h = g.add(h, ff);
        }
        let hf = norm(g, h, "norm.weight")?;
        let head = if cfg.tie_embeddings { embed } else { p.get("lm_head.weight")? };
        let logits = g.matmul_t(hf, head);
        Ok(ForwardOutput {
            logits,
            aux_loss: acc.aux_loss,
            aux_seeds: acc.aux_seeds,
            moe: acc.moe,
        })
    }
}
