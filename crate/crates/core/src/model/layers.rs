//! Building blocks shared by both decoder families.

use std::collections::HashMap;

use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Parameter leaves of one forward pass, looked up by name.
pub struct BoundParams {
    nodes: HashMap<String, NodeId>,
}

impl BoundParams {
    pub fn new(nodes: HashMap<String, NodeId>) -> Self {
        Self { nodes }
    }

    pub fn get(&self, name: &str) -> Result<NodeId> {
        self.nodes
            .get(name)
            .copied()
            .ok_or_else(|| Error::Shape(format!("missing parameter {name}")))
    }
}

/// A feed-forward expert: the dense MLP of a block, or one expert of a switch layer.
#[derive(Debug, Clone, Copy)]
pub enum Expert {
    Gelu {
        fc: NodeId,
        fc_bias: NodeId,
        proj: NodeId,
        proj_bias: NodeId,
    },
    SwiGlu {
        gate: NodeId,
        up: NodeId,
        down: NodeId,
    },
}

impl Expert {
    pub fn bind_gelu(p: &BoundParams, prefix: &str) -> Result<Self> {
        Ok(Expert::Gelu {
            fc: p.get(&format!("{prefix}.fc.weight"))?,
            fc_bias: p.get(&format!("{prefix}.fc.bias"))?,
            proj: p.get(&format!("{prefix}.proj.weight"))?,
            proj_bias: p.get(&format!("{prefix}.proj.bias"))?,
        })
    }

    pub fn bind_swiglu(p: &BoundParams, prefix: &str) -> Result<Self> {
        Ok(Expert::SwiGlu {
            gate: p.get(&format!("{prefix}.gate.weight"))?,
            up: p.get(&format!("{prefix}.up.weight"))?,
            down: p.get(&format!("{prefix}.down.weight"))?,
        })
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, x: NodeId) -> NodeId {
        match *self {
            Expert::Gelu {
                fc,
                fc_bias,
                proj,
                proj_bias,
            } => {
                let a = g.matmul(x, fc);
                let a = g.add_bias(a, fc_bias);
                let a = g.gelu(a);
                let o = g.matmul(a, proj);
                g.add_bias(o, proj_bias)
            }
            Expert::SwiGlu { gate, up, down } => {
                let a = g.matmul(x, gate);
                let a = g.silu(a);
                let b = g.matmul(x, up);
                let h = g.mul(a, b);
                g.matmul(h, down)
            }
        }
    }
}

/// Q/K/V/O projections of one attention block.
pub struct AttentionWeights {
    pub q: (NodeId, Option<NodeId>),
    pub k: (NodeId, Option<NodeId>),
    pub v: (NodeId, Option<NodeId>),
    pub o: (NodeId, Option<NodeId>),
}

impl AttentionWeights {
    pub fn bind(p: &BoundParams, prefix: &str, biases: bool) -> Result<Self> {
        let one = |m: &str| -> Result<(NodeId, Option<NodeId>)> {
            let w = p.get(&format!("{prefix}.{m}.weight"))?;
            let b = if biases { Some(p.get(&format!("{prefix}.{m}.bias"))?) } else { None };
            Ok((w, b))
        };
        Ok(Self {
            q: one("q")?,
            k: one("k")?,
            v: one("v")?,
            o: one("o")?,
        })
    }
}

fn linear<S: Scalar>(g: &mut Graph<S>, x: NodeId, (w, b): (NodeId, Option<NodeId>)) -> NodeId {
    let y = g.matmul(x, w);
    match b {
        Some(b) => g.add_bias(y, b),
        None => y,
    }
}

/// Rotary settings for an attention block; `None` means no rotation at all.
#[derive(Debug, Clone, Copy)]
pub struct Rotary {
    pub base: f64,
    pub zero_angles: bool,
}

#[allow(clippy::too_many_arguments)]
pub fn self_attention<S: Scalar>(
    g: &mut Graph<S>,
    x: NodeId,
    w: &AttentionWeights,
    batch: usize,
    seq: usize,
    heads: usize,
    rotary: Option<Rotary>,
) -> NodeId {
    let mut q = linear(g, x, w.q);
    let mut k = linear(g, x, w.k);
    let v = linear(g, x, w.v);
    if let Some(r) = rotary {
        q = g.rope(q, heads, seq, r.base, r.zero_angles);
        k = g.rope(k, heads, seq, r.base, r.zero_angles);
    }
    let att = g.causal_attention(q, k, v, batch, seq, heads);
    linear(g, att, w.o)
}
