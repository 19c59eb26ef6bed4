//! Top-1 switch routing with per-expert capacity.
//!
//! Each token goes to the expert with the highest router probability (ties
//! to the lowest index). Experts accept tokens in order up to
//! `ceil(capacity_factor * tokens / n_experts)`; overflow tokens get a zero
//! branch output, so the surrounding residual connection carries them
//! through unchanged. Routed outputs are scaled by the gate probability.

use serde::Serialize;

use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::model::config::MoEConfig;
use crate::model::layers::Expert;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SwitchStats {
    /// Chosen expert per token (before capacity is applied).
    pub assignments: Vec<usize>,
    /// Whether each token exceeded its expert's capacity.
    pub dropped_mask: Vec<bool>,
    pub dropped: usize,
    pub capacity: usize,
    /// Unweighted load-balancing term `E * Σ_e f_e * P_e`.
    pub load_balance: f64,
}

pub struct SwitchOutput<S> {
    pub output: NodeId,
    /// `aux_loss_coeff * load_balance`.
    pub aux_loss: f64,
    /// Gradient of `aux_loss` with respect to the router probability node.
    pub aux_seed: (NodeId, Vec<S>),
    pub stats: SwitchStats,
}

pub fn expert_capacity(capacity_factor: f64, tokens: usize, n_experts: usize) -> usize {
    (capacity_factor * tokens as f64 / n_experts as f64).ceil() as usize
}

/// Switch load-balancing term `E * Σ_e f_e * P_e` where `f_e` is the fraction
/// of tokens whose top-1 expert is `e` and `P_e` the mean router probability.
pub fn load_balance_loss<S: Scalar>(probs: &[S], assignments: &[usize], n_experts: usize) -> f64 {
    let n = assignments.len();
    if n == 0 {
        return 0.0;
    }
    let (frac, mean_prob) = routing_fractions(probs, assignments, n_experts);
    n_experts as f64 * frac.iter().zip(&mean_prob).map(|(f, p)| f * p).sum::<f64>()
}

fn routing_fractions<S: Scalar>(probs: &[S], assignments: &[usize], e: usize) -> (Vec<f64>, Vec<f64>) {
    let n = assignments.len() as f64;
    let mut frac = vec![0.0; e];
    let mut mean_prob = vec![0.0; e];
    for &a in assignments {
        frac[a] += 1.0;
    }
    for row in probs.chunks_exact(e) {
        for (m, &p) in mean_prob.iter_mut().zip(row) {
            *m += p.f64();
        }
    }
    for (f, m) in frac.iter_mut().zip(mean_prob.iter_mut()) {
        *f /= n;
        *m /= n;
    }
    (frac, mean_prob)
}

fn argmax_lowest<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Records a switch layer on the tape. `x` is `[tokens, hidden]`.
pub fn switch_layer<S: Scalar>(g: &mut Graph<S>, x: NodeId, router: NodeId, experts: &[Expert], cfg: &MoEConfig) -> SwitchOutput<S> {
    let (tokens, hidden) = g.dims(x);
    let e = experts.len();
    let logits = g.matmul(x, router);
    let probs = g.softmax_rows(logits);
    let pv = g.value(probs).to_vec();
    let assignments: Vec<usize> = pv.chunks_exact(e).map(argmax_lowest).collect();
    let capacity = expert_capacity(cfg.capacity_factor, tokens, e);

    let mut per_expert: Vec<Vec<usize>> = vec![Vec::new(); e];
    let mut dropped_mask = vec![false; tokens];
    for (t, &a) in assignments.iter().enumerate() {
        if per_expert[a].len() < capacity {
            per_expert[a].push(t);
        } else {
            dropped_mask[t] = true;
        }
    }

    let mut output: Option<NodeId> = None;
    for (ex, idx) in experts.iter().zip(&per_expert) {
        if idx.is_empty() {
            continue;
        }
        let expert_id = assignments[idx[0]];
        let sub = g.gather(x, idx.clone());
        let y = ex.forward(g, sub);
        let sub_probs = g.gather(probs, idx.clone());
        let gate = g.pick_cols(sub_probs, vec![expert_id; idx.len()]);
        let scaled = g.scale_rows(y, gate);
        let placed = g.scatter_rows(scaled, idx.clone(), tokens);
        output = Some(match output {
            None => placed,
            Some(acc) => g.add(acc, placed),
        });
    }
    let output = output.unwrap_or_else(|| g.input(tokens, hidden, vec![S::zero(); tokens * hidden]));

    let (frac, _) = routing_fractions(&pv, &assignments, e);
    let load_balance = load_balance_loss(&pv, &assignments, e);
    let coeff = cfg.aux_loss_coeff;
    // d/dp[t,e] of coeff * E * Σ_e f_e * mean_t p[t,e]
    let per_col: Vec<S> = frac.iter().map(|f| S::of(coeff * e as f64 * f / tokens as f64)).collect();
    let seed: Vec<S> = (0..tokens).flat_map(|_| per_col.iter().copied()).collect();
    let dropped = dropped_mask.iter().filter(|d| **d).count();
    SwitchOutput {
        output,
        aux_loss: coeff * load_balance,
        aux_seed: (probs, seed),
        stats: SwitchStats {
            assignments,
            dropped_mask,
            dropped,
            capacity,
            load_balance,
        },
    }
}

/// Weights of one feed-forward expert.
#[derive(Debug, Clone)]
pub enum ExpertWeights<S> {
    Gelu {
        fc: Tensor<S>,
        fc_bias: Tensor<S>,
        proj: Tensor<S>,
        proj_bias: Tensor<S>,
    },
    SwiGlu {
        gate: Tensor<S>,
        up: Tensor<S>,
        down: Tensor<S>,
    },
}

/// A standalone switch layer: router `[hidden, n_experts]` plus experts.
#[derive(Debug, Clone)]
pub struct MoeLayer<S> {
    pub router: Tensor<S>,
    pub experts: Vec<ExpertWeights<S>>,
}

#[derive(Debug, Clone)]
pub struct MoeOutput<S> {
    /// `[tokens, hidden]` branch output; zero rows for dropped tokens.
    pub output: Tensor<S>,
    pub aux_loss: f64,
    pub stats: SwitchStats,
}

fn leaf<S: Scalar>(g: &mut Graph<S>, t: &Tensor<S>) -> NodeId {
    let (r, c) = t.matrix_dims();
    g.input(r, c, t.data.clone())
}

fn bind_expert<S: Scalar>(g: &mut Graph<S>, w: &ExpertWeights<S>) -> Expert {
    match w {
        ExpertWeights::Gelu {
            fc,
            fc_bias,
            proj,
            proj_bias,
        } => Expert::Gelu {
            fc: leaf(g, fc),
            fc_bias: leaf(g, fc_bias),
            proj: leaf(g, proj),
            proj_bias: leaf(g, proj_bias),
        },
        ExpertWeights::SwiGlu { gate, up, down } => Expert::SwiGlu {
            gate: leaf(g, gate),
            up: leaf(g, up),
            down: leaf(g, down),
        },
    }
}

fn check_activations<S: Scalar>(activations: &Tensor<S>, hidden: usize) -> Result<(usize, usize)> {
    let (rows, cols) = activations.matrix_dims();
    if activations.shape.len() != 2 || cols != hidden {
        return Err(Error::Shape(format!(
            "activations must be [tokens, {hidden}], got {:?}",
            activations.shape
        )));
    }
    Ok((rows, cols))
}

/// Runs a switch layer on `[tokens, hidden]` activations.
pub fn moe_forward<S: Scalar>(layer: &MoeLayer<S>, cfg: &MoEConfig, activations: &Tensor<S>) -> Result<MoeOutput<S>> {
    cfg.validate()?;
    if layer.experts.len() != cfg.n_experts || layer.router.shape.get(1) != Some(&cfg.n_experts) {
        return Err(Error::Shape(format!(
            "layer has {} experts / router {:?}, config wants {}",
            layer.experts.len(),
            layer.router.shape,
            cfg.n_experts
        )));
    }
    let (rows, cols) = check_activations(activations, layer.router.shape[0])?;
    let mut g = Graph::new();
    let x = g.input(rows, cols, activations.data.clone());
    let router = leaf(&mut g, &layer.router);
    let experts: Vec<Expert> = layer.experts.iter().map(|w| bind_expert(&mut g, w)).collect();
    let out = switch_layer(&mut g, x, router, &experts, cfg);
    Ok(MoeOutput {
        output: Tensor {
            shape: vec![rows, cols],
            data: g.value(out.output).to_vec(),
        },
        aux_loss: out.aux_loss,
        stats: out.stats,
    })
}

/// The plain dense MLP of one expert, for equivalence checks.
pub fn dense_mlp<S: Scalar>(weights: &ExpertWeights<S>, activations: &Tensor<S>) -> Result<Tensor<S>> {
    let hidden = match weights {
        ExpertWeights::Gelu { fc, .. } => fc.shape[0],
        ExpertWeights::SwiGlu { gate, .. } => gate.shape[0],
    };
    let (rows, cols) = check_activations(activations, hidden)?;
    let mut g = Graph::new();
    let x = g.input(rows, cols, activations.data.clone());
    let e = bind_expert(&mut g, weights);
    let y = e.forward(&mut g, x);
    Ok(Tensor {
        shape: vec![rows, cols],
        data: g.value(y).to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn rand_tensor(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * std).collect(),
        }
    }

    fn layer(rng: &mut impl Rng, hidden: usize, inter: usize, e: usize, swiglu: bool) -> MoeLayer<f64> {
        let experts = (0..e)
            .map(|_| {
                if swiglu {
                    ExpertWeights::SwiGlu {
                        gate: rand_tensor(rng, &[hidden, inter], 0.3),
                        up: rand_tensor(rng, &[hidden, inter], 0.3),
                        down: rand_tensor(rng, &[inter, hidden], 0.3),
                    }
                } else {
                    ExpertWeights::Gelu {
                        fc: rand_tensor(rng, &[hidden, inter], 0.3),
                        fc_bias: rand_tensor(rng, &[inter], 0.1),
                        proj: rand_tensor(rng, &[inter, hidden], 0.3),
                        proj_bias: rand_tensor(rng, &[hidden], 0.1),
                    }
                }
            })
            .collect();
        MoeLayer {
            router: rand_tensor(rng, &[hidden, e], 1.0),
            experts,
        }
    }

    #[test]
    fn single_expert_equals_dense_mlp() {
        let mut rng = crate::rng::keyed(1, 0, crate::rng::Purpose::Init);
        for swiglu in [false, true] {
            let l = layer(&mut rng, 8, 16, 1, swiglu);
            let x = rand_tensor(&mut rng, &[10, 8], 1.0);
            let cfg = MoEConfig {
                n_experts: 1,
                capacity_factor: 1.0,
                aux_loss_coeff: 0.01,
            };
            let out = moe_forward(&l, &cfg, &x).unwrap();
            let dense = dense_mlp(&l.experts[0], &x).unwrap();
            assert_eq!(out.stats.dropped, 0);
            for (a, b) in out.output.data.iter().zip(&dense.data) {
                assert!((a - b).abs() <= 1e-6 * b.abs().max(1e-12), "{a} vs {b}");
            }
            // one expert, gate 1, every token routed: E * 1 * 1
            assert_eq!(out.stats.load_balance, 1.0);
        }
    }

    #[test]
    fn capacity_drops_overflow_tokens_to_zero() {
        let mut rng = crate::rng::keyed(2, 0, crate::rng::Purpose::Init);
        let mut l = layer(&mut rng, 4, 8, 2, true);
        l.router = Tensor {
            shape: vec![4, 2],
            data: vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        };
        let x = rand_tensor(&mut rng, &[6, 4], 1.0);
        let cfg = MoEConfig {
            n_experts: 2,
            capacity_factor: 1.0,
            aux_loss_coeff: 0.0,
        };
        let out = moe_forward(&l, &cfg, &x).unwrap();
        // zero router: all probs 0.5, ties to expert 0, capacity 3
        assert_eq!(out.stats.capacity, 3);
        assert_eq!(out.stats.assignments, vec![0; 6]);
        assert_eq!(out.stats.dropped, 3);
        assert_eq!(out.output.shape, vec![6, 4]);
        for t in 3..6 {
            assert!(out.output.data[t * 4..(t + 1) * 4].iter().all(|v| *v == 0.0));
        }
        let big = MoEConfig {
            capacity_factor: 1e6,
            ..cfg
        };
        assert_eq!(moe_forward(&l, &big, &x).unwrap().stats.dropped, 0);
    }

    #[test]
    fn uniform_routing_balance_is_exactly_one() {
        for e in [2usize, 4, 8] {
            let n = 4 * e;
            let probs = vec![1.0 / e as f64; n * e];
            let assignments: Vec<usize> = (0..n).map(|t| t % e).collect();
            assert_eq!(load_balance_loss(&probs, &assignments, e), 1.0);
        }
    }

    #[test]
    fn routing_is_deterministic() {
        let mut rng = crate::rng::keyed(3, 0, crate::rng::Purpose::Init);
        let l = layer(&mut rng, 8, 8, 4, false);
        let x = rand_tensor(&mut rng, &[32, 8], 1.0);
        let cfg = MoEConfig {
            n_experts: 4,
            capacity_factor: 1.25,
            aux_loss_coeff: 0.01,
        };
        let a = moe_forward(&l, &cfg, &x).unwrap();
        let b = moe_forward(&l, &cfg, &x).unwrap();
        assert_eq!(a.stats, b.stats);
        assert_eq!(a.output, b.output);
        assert!(a.stats.assignments.iter().any(|&v| v != a.stats.assignments[0]));
    }
}
