//! A small reverse-mode tape over 2-D matrices.
//!
//! Every node is a `[rows, cols]` matrix. Ops are fused at the granularity
//! the transformer needs (layer norms, causal attention, rotary embedding),
//! so the tape stays short and each backward rule is written once by hand.
//! Losses live outside the tape: callers seed `backward` with the gradient
//! of their loss with respect to one or more nodes.

use crate::tensor::{dot, matmul, matmul_t, matmul_tn_acc, Scalar};

pub type NodeId = usize;

#[derive(Debug)]
enum Op<S> {
    Input,
    Param(usize),
    Gather {
        table: NodeId,
        ids: Vec<usize>,
    },
    Add(NodeId, NodeId),
    AddBias {
        x: NodeId,
        bias: NodeId,
    },
    Mul(NodeId, NodeId),
    MatMul {
        x: NodeId,
        w: NodeId,
    },
    MatMulT {
        x: NodeId,
        w: NodeId,
    },
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Vec<S>,
        rstd: Vec<S>,
    },
    RmsNorm {
        x: NodeId,
        gain: NodeId,
        rstd: Vec<S>,
    },
    Gelu(NodeId),
    Silu(NodeId),
    Rope {
        x: NodeId,
        cos: Vec<S>,
        sin: Vec<S>,
        heads: usize,
        seq: usize,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<S>,
    },
    SoftmaxRows(NodeId),
    PickCols {
        x: NodeId,
        cols: Vec<usize>,
    },
    ScaleRows {
        x: NodeId,
        s: NodeId,
    },
    ScatterRows {
        x: NodeId,
        idx: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node<S> {
    rows: usize,
    cols: usize,
    value: Vec<S>,
    op: Op<S>,
}

/// Recorded forward computation.
#[derive(Debug, Default)]
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<S>, op: Op<S>) -> NodeId {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
        });
        self.nodes.len() - 1
    }

    pub fn value(&self, id: NodeId) -> &[S] {
        &self.nodes[id].value
    }

    pub fn dims(&self, id: NodeId) -> (usize, usize) {
        (self.nodes[id].rows, self.nodes[id].cols)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; receives no gradient of interest.
    pub fn input(&mut self, rows: usize, cols: usize, value: Vec<S>) -> NodeId {
        self.push(rows, cols, value, Op::Input)
    }

    /// Trainable leaf tagged with its parameter index.
    pub fn param(&mut self, index: usize, rows: usize, cols: usize, value: Vec<S>) -> NodeId {
        self.push(rows, cols, value, Op::Param(index))
    }

    /// Row lookup: `out[i] = table[ids[i]]`.
    pub fn gather(&mut self, table: NodeId, ids: Vec<usize>) -> NodeId {
        let cols = self.nodes[table].cols;
        let src = &self.nodes[table].value;
        let mut value = Vec::with_capacity(ids.len() * cols);
        for &i in &ids {
            value.extend_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        let rows = ids.len();
        self.push(rows, cols, value, Op::Gather { table, ids })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.dims(a), self.dims(b), "add: shape mismatch");
        let value = self.nodes[a]
            .value
            .iter()
            .zip(&self.nodes[b].value)
            .map(|(&x, &y)| x + y)
            .collect();
        let (r, c) = self.dims(a);
        self.push(r, c, value, Op::Add(a, b))
    }

    /// `x[n,m] + bias[1,m]` broadcast over rows.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let (r, c) = self.dims(x);
        assert_eq!(self.nodes[bias].value.len(), c, "add_bias: width mismatch");
        let b = &self.nodes[bias].value;
        let mut value = self.nodes[x].value.clone();
        for row in value.chunks_exact_mut(c) {
            for (v, &bb) in row.iter_mut().zip(b) {
                *v += bb;
            }
        }
        self.push(r, c, value, Op::AddBias { x, bias })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.dims(a), self.dims(b), "mul: shape mismatch");
        let value = self.nodes[a]
            .value
            .iter()
            .zip(&self.nodes[b].value)
            .map(|(&x, &y)| x * y)
            .collect();
        let (r, c) = self.dims(a);
        self.push(r, c, value, Op::Mul(a, b))
    }

    /// `x[n,k] · w[k,m]`
    pub fn matmul(&mut self, x: NodeId, w: NodeId) -> NodeId {
        let (n, k) = self.dims(x);
        let (k2, m) = self.dims(w);
        assert_eq!(k, k2, "matmul: inner dims");
        let value = matmul(&self.nodes[x].value, &self.nodes[w].value, n, k, m);
        self.push(n, m, value, Op::MatMul { x, w })
    }

    /// `x[n,k] · w[m,k]ᵀ`, used for the tied output head.
    pub fn matmul_t(&mut self, x: NodeId, w: NodeId) -> NodeId {
        let (n, k) = self.dims(x);
        let (m, k2) = self.dims(w);
        assert_eq!(k, k2, "matmul_t: inner dims");
        let value = matmul_t(&self.nodes[x].value, &self.nodes[w].value, n, k, m);
        self.push(n, m, value, Op::MatMulT { x, w })
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> NodeId {
        let (r, c) = self.dims(x);
        let eps = S::of(eps);
        let inv_c = S::one() / S::of(c as f64);
        let g = &self.nodes[gain].value;
        let b = &self.nodes[bias].value;
        let mut xhat = vec![S::zero(); r * c];
        let mut rstd = vec![S::zero(); r];
        let mut value = vec![S::zero(); r * c];
        for (i, row) in self.nodes[x].value.chunks_exact(c).enumerate() {
            let mean = row.iter().copied().sum::<S>() * inv_c;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_c;
            let rs = S::one() / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                value[i * c + j] = h * g[j] + b[j];
            }
        }
        self.push(
            r,
            c,
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        )
    }

    pub fn rms_norm(&mut self, x: NodeId, gain: NodeId, eps: f64) -> NodeId {
        let (r, c) = self.dims(x);
        let eps = S::of(eps);
        let inv_c = S::one() / S::of(c as f64);
        let g = &self.nodes[gain].value;
        let mut rstd = vec![S::zero(); r];
        let mut value = vec![S::zero(); r * c];
        for (i, row) in self.nodes[x].value.chunks_exact(c).enumerate() {
            let ms = row.iter().map(|&v| v * v).sum::<S>() * inv_c;
            let rs = S::one() / (ms + eps).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                value[i * c + j] = row[j] * rs * g[j];
            }
        }
        self.push(r, c, value, Op::RmsNorm { x, gain, rstd })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let (r, c) = self.dims(x);
        let half = S::of(0.5);
        let (gc, gk) = (S::of(GELU_C), S::of(GELU_K));
        let value = self.nodes[x]
            .value
            .iter()
            .map(|&v| half * v * (S::one() + (gc * (v + gk * v * v * v)).tanh()))
            .collect();
        self.push(r, c, value, Op::Gelu(x))
    }

    pub fn silu(&mut self, x: NodeId) -> NodeId {
        let (r, c) = self.dims(x);
        let value = self.nodes[x].value.iter().map(|&v| v * sigmoid(v)).collect();
        self.push(r, c, value, Op::Silu(x))
    }

    /// Rotary position embedding over `[batch*seq, heads*head_dim]`, using the
    /// rotate-half pairing `(i, i + head_dim/2)`. Row `r` sits at position
    /// `r % seq`.
    pub fn rope(&mut self, x: NodeId, heads: usize, seq: usize, base: f64, zero_angles: bool) -> NodeId {
        let (r, c) = self.dims(x);
        let d = c / heads;
        let half = d / 2;
        let mut cos = vec![S::one(); seq * half];
        let mut sin = vec![S::zero(); seq * half];
        if !zero_angles {
            for p in 0..seq {
                for i in 0..half {
                    let inv_freq = base.powf(-2.0 * i as f64 / d as f64);
                    let angle = p as f64 * inv_freq;
                    cos[p * half + i] = S::of(angle.cos());
                    sin[p * half + i] = S::of(angle.sin());
                }
            }
        }
        let src = &self.nodes[x].value;
        let mut value = src.clone();
        for row in 0..r {
            let p = row % seq;
            for h in 0..heads {
                let base_idx = row * c + h * d;
                for i in 0..half {
                    let (co, si) = (cos[p * half + i], sin[p * half + i]);
                    let x1 = src[base_idx + i];
                    let x2 = src[base_idx + i + half];
                    value[base_idx + i] = x1 * co - x2 * si;
                    value[base_idx + i + half] = x2 * co + x1 * si;
                }
            }
        }
        self.push(
            r,
            c,
            value,
            Op::Rope {
                x,
                cos,
                sin,
                heads,
                seq,
            },
        )
    }

    /// Causal multi-head scaled dot-product attention.
    pub fn causal_attention(&mut self, q: NodeId, k: NodeId, v: NodeId, batch: usize, seq: usize, heads: usize) -> NodeId {
        let (r, c) = self.dims(q);
        assert_eq!(r, batch * seq, "attention: rows != batch*seq");
        let d = c / heads;
        let scale = S::one() / S::of(d as f64).sqrt();
        let (qv, kv, vv) = (&self.nodes[q].value, &self.nodes[k].value, &self.nodes[v].value);
        let mut probs = vec![S::zero(); batch * heads * seq * seq];
        let mut out = vec![S::zero(); r * c];
        for b in 0..batch {
            for h in 0..heads {
                let pbase = (b * heads + h) * seq * seq;
                for i in 0..seq {
                    let qi = &qv[(b * seq + i) * c + h * d..][..d];
                    let prow = &mut probs[pbase + i * seq..pbase + (i + 1) * seq];
                    let mut max = S::neg_infinity();
                    for j in 0..=i {
                        let kj = &kv[(b * seq + j) * c + h * d..][..d];
                        let s = dot(qi, kj) * scale;
                        prow[j] = s;
                        max = max.max(s);
                    }
                    let mut sum = S::zero();
                    for p in prow.iter_mut().take(i + 1) {
                        *p = (*p - max).exp();
                        sum += *p;
                    }
                    let orow = &mut out[(b * seq + i) * c + h * d..][..d];
                    for j in 0..=i {
                        prow[j] /= sum;
                        let pj = prow[j];
                        let vj = &vv[(b * seq + j) * c + h * d..][..d];
                        for (o, &vvv) in orow.iter_mut().zip(vj) {
                            *o += pj * vvv;
                        }
                    }
                }
            }
        }
        self.push(
            r,
            c,
            out,
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            },
        )
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let (r, c) = self.dims(x);
        let mut value = self.nodes[x].value.clone();
        for row in value.chunks_exact_mut(c) {
            crate::tensor::softmax_in_place(row);
        }
        self.push(r, c, value, Op::SoftmaxRows(x))
    }

    /// `out[i,0] = x[i, cols[i]]`
    pub fn pick_cols(&mut self, x: NodeId, cols: Vec<usize>) -> NodeId {
        let (r, c) = self.dims(x);
        assert_eq!(cols.len(), r);
        let value = cols
            .iter()
            .enumerate()
            .map(|(i, &j)| self.nodes[x].value[i * c + j])
            .collect();
        self.push(r, 1, value, Op::PickCols { x, cols })
    }

    /// `out[i,:] = x[i,:] * s[i,0]`
    pub fn scale_rows(&mut self, x: NodeId, s: NodeId) -> NodeId {
        let (r, c) = self.dims(x);
        assert_eq!(self.dims(s), (r, 1));
        let sv = &self.nodes[s].value;
        let mut value = self.nodes[x].value.clone();
        for (row, &f) in value.chunks_exact_mut(c).zip(sv) {
            for v in row {
                *v *= f;
            }
        }
        self.push(r, c, value, Op::ScaleRows { x, s })
    }

    /// `out[idx[i],:] += x[i,:]`, producing `rows` output rows.
    pub fn scatter_rows(&mut self, x: NodeId, idx: Vec<usize>, rows: usize) -> NodeId {
        let (r, c) = self.dims(x);
        assert_eq!(idx.len(), r);
        let mut value = vec![S::zero(); rows * c];
        for (i, &dst) in idx.iter().enumerate() {
            let src = &self.nodes[x].value[i * c..(i + 1) * c];
            for (o, &v) in value[dst * c..(dst + 1) * c].iter_mut().zip(src) {
                *o += v;
            }
        }
        self.push(rows, c, value, Op::ScatterRows { x, idx })
    }

    /// Back-propagates the given seed gradients and returns per-node gradients.
    pub fn backward(&self, seeds: &[(NodeId, Vec<S>)]) -> Gradients<S> {
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (id, g) in seeds {
            assert_eq!(g.len(), self.nodes[*id].value.len(), "seed gradient shape");
            accumulate(&mut grads, &self.nodes, *id, g);
        }
        for id in (0..self.nodes.len()).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.backward_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(id, n)| match n.op {
                Op::Param(p) => Some((p, id)),
                _ => None,
            })
            .collect();
        Gradients { grads, params }
    }

    fn backward_node(&self, id: NodeId, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[id];
        let (rows, cols) = (node.rows, node.cols);
        let nodes = &self.nodes;
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::Gather { table, ids } => {
                let tc = nodes[*table].cols;
                let dst = slot(grads, nodes, *table);
                for (i, &t) in ids.iter().enumerate() {
                    for j in 0..tc {
                        dst[t * tc + j] += g[i * tc + j];
                    }
                }
            }
            Op::Add(a, b) => {
                accumulate(grads, nodes, *a, g);
                accumulate(grads, nodes, *b, g);
            }
            Op::AddBias { x, bias } => {
                accumulate(grads, nodes, *x, g);
                let db = slot(grads, nodes, *bias);
                for row in g.chunks_exact(cols) {
                    for (d, &v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
            }
            Op::Mul(a, b) => {
                let da: Vec<S> = g.iter().zip(&nodes[*b].value).map(|(&x, &y)| x * y).collect();
                let db: Vec<S> = g.iter().zip(&nodes[*a].value).map(|(&x, &y)| x * y).collect();
                accumulate(grads, nodes, *a, &da);
                accumulate(grads, nodes, *b, &db);
            }
            Op::MatMul { x, w } => {
                let (n, k) = (nodes[*x].rows, nodes[*x].cols);
                let m = cols;
                // dx = g · wᵀ  (w is [k,m], so treat it as the "[m,k]ᵀ" operand)
                let dx = matmul_t(g, &nodes[*w].value, n, m, k);
                accumulate(grads, nodes, *x, &dx);
                let dw = slot(grads, nodes, *w);
                matmul_tn_acc(dw, &nodes[*x].value, g, n, k, m);
            }
            Op::MatMulT { x, w } => {
                let (n, k) = (nodes[*x].rows, nodes[*x].cols);
                let m = cols;
                let dx = matmul(g, &nodes[*w].value, n, m, k);
                accumulate(grads, nodes, *x, &dx);
                // dw[m,k] += gᵀ[m,n] · x[n,k]
                let dw = slot(grads, nodes, *w);
                matmul_tn_acc(dw, g, &nodes[*x].value, n, m, k);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gv = &nodes[*gain].value;
                let inv_c = S::one() / S::of(cols as f64);
                let mut dx = vec![S::zero(); rows * cols];
                let mut dg = vec![S::zero(); cols];
                let mut dbias = vec![S::zero(); cols];
                for i in 0..rows {
                    let gr = &g[i * cols..(i + 1) * cols];
                    let hr = &xhat[i * cols..(i + 1) * cols];
                    let mut mean_dh = S::zero();
                    let mut mean_dh_h = S::zero();
                    for j in 0..cols {
                        let dh = gr[j] * gv[j];
                        mean_dh += dh;
                        mean_dh_h += dh * hr[j];
                        dg[j] += gr[j] * hr[j];
                        dbias[j] += gr[j];
                    }
                    mean_dh *= inv_c;
                    mean_dh_h *= inv_c;
                    for j in 0..cols {
                        let dh = gr[j] * gv[j];
                        dx[i * cols + j] = rstd[i] * (dh - mean_dh - hr[j] * mean_dh_h);
                    }
                }
                accumulate(grads, nodes, *x, &dx);
                accumulate(grads, nodes, *gain, &dg);
                accumulate(grads, nodes, *bias, &dbias);
            }
            Op::RmsNorm { x, gain, rstd } => {
                let gv = &nodes[*gain].value;
                let xv = &nodes[*x].value;
                let inv_c = S::one() / S::of(cols as f64);
                let mut dx = vec![S::zero(); rows * cols];
                let mut dg = vec![S::zero(); cols];
                for i in 0..rows {
                    let r = rstd[i];
                    let xr = &xv[i * cols..(i + 1) * cols];
                    let gr = &g[i * cols..(i + 1) * cols];
                    let mut m = S::zero();
                    for j in 0..cols {
                        m += gr[j] * gv[j] * xr[j];
                        dg[j] += gr[j] * xr[j] * r;
                    }
                    m *= inv_c;
                    for j in 0..cols {
                        dx[i * cols + j] = r * (gr[j] * gv[j] - xr[j] * r * r * m);
                    }
                }
                accumulate(grads, nodes, *x, &dx);
                accumulate(grads, nodes, *gain, &dg);
            }
            Op::Gelu(x) => {
                let half = S::of(0.5);
                let (gc, gk) = (S::of(GELU_C), S::of(GELU_K));
                let three = S::of(3.0);
                let dx: Vec<S> = nodes[*x]
                    .value
                    .iter()
                    .zip(g)
                    .map(|(&v, &gg)| {
                        let t = (gc * (v + gk * v * v * v)).tanh();
                        let d = half * (S::one() + t) + half * v * (S::one() - t * t) * gc * (S::one() + three * gk * v * v);
                        gg * d
                    })
                    .collect();
                accumulate(grads, nodes, *x, &dx);
            }
            Op::Silu(x) => {
                let dx: Vec<S> = nodes[*x]
                    .value
                    .iter()
                    .zip(g)
                    .map(|(&v, &gg)| {
                        let s = sigmoid(v);
                        gg * s * (S::one() + v * (S::one() - s))
                    })
                    .collect();
                accumulate(grads, nodes, *x, &dx);
            }
            Op::Rope {
                x,
                cos,
                sin,
                heads,
                seq,
            } => {
                let d = cols / heads;
                let half = d / 2;
                let mut dx = g.to_vec();
                for row in 0..rows {
                    let p = row % seq;
                    for h in 0..*heads {
                        let bi = row * cols + h * d;
                        for i in 0..half {
                            let (co, si) = (cos[p * half + i], sin[p * half + i]);
                            let g1 = g[bi + i];
                            let g2 = g[bi + i + half];
                            dx[bi + i] = g1 * co + g2 * si;
                            dx[bi + i + half] = g2 * co - g1 * si;
                        }
                    }
                }
                accumulate(grads, nodes, *x, &dx);
            }
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            } => {
                let (batch, seq, heads) = (*batch, *seq, *heads);
                let d = cols / heads;
                let scale = S::one() / S::of(d as f64).sqrt();
                let (qv, kv, vv) = (&nodes[*q].value, &nodes[*k].value, &nodes[*v].value);
                let mut dq = vec![S::zero(); rows * cols];
                let mut dk = vec![S::zero(); rows * cols];
                let mut dv = vec![S::zero(); rows * cols];
                let mut dp = vec![S::zero(); seq];
                for b in 0..batch {
                    for h in 0..heads {
                        let pbase = (b * heads + h) * seq * seq;
                        for i in 0..seq {
                            let oi = (b * seq + i) * cols + h * d;
                            let gi = &g[oi..oi + d];
                            let prow = &probs[pbase + i * seq..pbase + i * seq + i + 1];
                            let mut weighted = S::zero();
                            for j in 0..=i {
                                let vj = (b * seq + j) * cols + h * d;
                                dp[j] = dot(gi, &vv[vj..vj + d]);
                                weighted += prow[j] * dp[j];
                                for t in 0..d {
                                    dv[vj + t] += prow[j] * gi[t];
                                }
                            }
                            for j in 0..=i {
                                let ds = prow[j] * (dp[j] - weighted) * scale;
                                if ds == S::zero() {
                                    continue;
                                }
                                let kj = (b * seq + j) * cols + h * d;
                                for t in 0..d {
                                    dq[oi + t] += ds * kv[kj + t];
                                    dk[kj + t] += ds * qv[oi + t];
                                }
                            }
                        }
                    }
                }
                accumulate(grads, nodes, *q, &dq);
                accumulate(grads, nodes, *k, &dk);
                accumulate(grads, nodes, *v, &dv);
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let mut dx = vec![S::zero(); rows * cols];
                for i in 0..rows {
                    let yr = &y[i * cols..(i + 1) * cols];
                    let gr = &g[i * cols..(i + 1) * cols];
                    let s = dot(yr, gr);
                    for j in 0..cols {
                        dx[i * cols + j] = yr[j] * (gr[j] - s);
                    }
                }
                accumulate(grads, nodes, *x, &dx);
            }
            Op::PickCols { x, cols: picks } => {
                let xc = nodes[*x].cols;
                let dst = slot(grads, nodes, *x);
                for (i, &j) in picks.iter().enumerate() {
                    dst[i * xc + j] += g[i];
                }
            }
            Op::ScaleRows { x, s } => {
                let sv = &nodes[*s].value;
                let xv = &nodes[*x].value;
                let mut dx = g.to_vec();
                let mut ds = vec![S::zero(); rows];
                for i in 0..rows {
                    let gr = &g[i * cols..(i + 1) * cols];
                    ds[i] = dot(gr, &xv[i * cols..(i + 1) * cols]);
                    for v in &mut dx[i * cols..(i + 1) * cols] {
                        *v *= sv[i];
                    }
                }
                accumulate(grads, nodes, *x, &dx);
                accumulate(grads, nodes, *s, &ds);
            }
            Op::ScatterRows { x, idx } => {
                let mut dx = Vec::with_capacity(idx.len() * cols);
                for &src in idx {
                    dx.extend_from_slice(&g[src * cols..(src + 1) * cols]);
                }
                accumulate(grads, nodes, *x, &dx);
            }
        }
    }
}

fn slot<'a, S: Scalar>(grads: &'a mut [Option<Vec<S>>], nodes: &[Node<S>], id: NodeId) -> &'a mut Vec<S> {
    grads[id].get_or_insert_with(|| vec![S::zero(); nodes[id].value.len()])
}

fn accumulate<S: Scalar>(grads: &mut [Option<Vec<S>>], nodes: &[Node<S>], id: NodeId, g: &[S]) {
    match &mut grads[id] {
        Some(acc) => {
            for (a, &v) in acc.iter_mut().zip(g) {
                *a += v;
            }
        }
        slot @ None => {
            debug_assert_eq!(g.len(), nodes[id].value.len());
            *slot = Some(g.to_vec());
        }
    }
}

/// Result of a backward pass.
pub struct Gradients<S> {
    grads: Vec<Option<Vec<S>>>,
    params: Vec<(usize, NodeId)>,
}

impl<S: Scalar> Gradients<S> {
    pub fn node(&self, id: NodeId) -> Option<&[S]> {
        self.grads[id].as_deref()
    }

    /// Gradients indexed by parameter slot; parameters that did not take part
    /// in the computation get zeros of the given size.
    pub fn into_param_grads(mut self, sizes: &[usize]) -> Vec<Vec<S>> {
        let mut out: Vec<Vec<S>> = sizes.iter().map(|&n| vec![S::zero(); n]).collect();
        for (p, id) in self.params {
            if let Some(g) = self.grads[id].take() {
                out[p] = g;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central-difference check of `sum(w ⊙ f(x))` for a single-op graph.
    fn check_unary(build: impl Fn(&mut Graph<f64>, NodeId) -> NodeId, x: Vec<f64>, rows: usize, cols: usize) {
        let weights: Vec<f64> = (0..64).map(|i| ((i * 7 % 11) as f64 - 5.0) / 3.0).collect();
        let eval = |x: &[f64]| -> (f64, Vec<f64>) {
            let mut g = Graph::new();
            let xi = g.param(0, rows, cols, x.to_vec());
            let y = build(&mut g, xi);
            let n = g.value(y).len();
            let w = &weights[..n];
            let loss = dot(g.value(y), w);
            let grads = g.backward(&[(y, w.to_vec())]);
            (loss, grads.node(xi).unwrap().to_vec())
        };
        let (_, analytic) = eval(&x);
        let eps = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] += eps;
            let mut xm = x.clone();
            xm[i] -= eps;
            let fd = (eval(&xp).0 - eval(&xm).0) / (2.0 * eps);
            assert!((fd - analytic[i]).abs() < 1e-7, "elem {i}: fd {fd} vs {}", analytic[i]);
        }
    }

    fn sample(n: usize) -> Vec<f64> {
        (0..n).map(|i| ((i * 37 % 17) as f64 - 8.0) / 6.0).collect()
    }

    #[test]
    fn unary_ops_match_finite_differences() {
        check_unary(|g, x| g.gelu(x), sample(6), 2, 3);
        check_unary(|g, x| g.silu(x), sample(6), 2, 3);
        check_unary(|g, x| g.softmax_rows(x), sample(8), 2, 4);
        check_unary(|g, x| g.rope(x, 2, 3, 10000.0, false), sample(24), 3, 8);
        check_unary(
            |g, x| {
                let gain = g.input(1, 4, vec![1.0, 0.5, -2.0, 1.5]);
                let bias = g.input(1, 4, vec![0.1, 0.0, 0.3, -0.2]);
                g.layer_norm(x, gain, bias, 1e-5)
            },
            sample(12),
            3,
            4,
        );
        check_unary(
            |g, x| {
                let gain = g.input(1, 4, vec![1.0, 0.5, -2.0, 1.5]);
                g.rms_norm(x, gain, 1e-5)
            },
            sample(12),
            3,
            4,
        );
        check_unary(
            |g, x| {
                // x is [4,4] = q; k and v derived from it so all three paths are hit
                let k = g.gelu(x);
                let v = g.silu(x);
                g.causal_attention(x, k, v, 2, 2, 2)
            },
            sample(16),
            4,
            4,
        );
    }

    #[test]
    fn routing_ops_match_finite_differences() {
        check_unary(
            |g, x| {
                let p = g.softmax_rows(x);
                let picked = g.pick_cols(p, vec![2, 0, 1]);
                let scaled = g.scale_rows(x, picked);
                let sub = g.gather(scaled, vec![2, 0]);
                g.scatter_rows(sub, vec![1, 0], 3)
            },
            sample(9),
            3,
            3,
        );
        check_unary(
            |g, x| {
                let w = g.input(3, 2, vec![0.3, -1.0, 0.7, 0.2, -0.5, 1.1]);
                let y = g.matmul(x, w);
                let wt = g.input(2, 3, vec![0.3, -1.0, 0.7, 0.2, -0.5, 1.1]);
                let z = g.matmul_t(x, wt);
                let s = g.add(y, z);
                let b = g.input(1, 2, vec![0.5, -0.5]);
                let sb = g.add_bias(s, b);
                g.mul(sb, sb)
            },
            sample(6),
            2,
            3,
        );
    }

    #[test]
    fn causal_attention_ignores_future_rows() {
        let run = |x: Vec<f64>| {
            let mut g = Graph::new();
            let q = g.input(3, 2, x);
            let out = g.causal_attention(q, q, q, 1, 3, 1);
            g.value(out).to_vec()
        };
        let a = run(vec![0.1, 0.2, 0.3, -0.4, 0.5, 0.6]);
        let b = run(vec![0.1, 0.2, 0.3, -0.4, 9.0, -7.0]);
        assert_eq!(a[..4], b[..4]);
        assert_ne!(a[4..], b[4..]);
    }
}
