//! First-order optimizers behind a common trait, selectable by name.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ParamKind, ParamStore};
use crate::registry::Registry;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default = "default_max_lr")]
    pub max_lr: f64,
    #[serde(default = "default_betas")]
    pub betas: [f64; 2],
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Decoupled decay, applied to matrix weights only.
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    #[serde(default = "default_grad_clip")]
    pub grad_clip: Option<f64>,
}

fn default_name() -> String {
    "adamw".into()
}
fn default_max_lr() -> f64 {
    3e-4
}
fn default_betas() -> [f64; 2] {
    [0.9, 0.95]
}
fn default_eps() -> f64 {
    1e-8
}
fn default_weight_decay() -> f64 {
    0.1
}
fn default_grad_clip() -> Option<f64> {
    Some(1.0)
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            name: default_name(),
            max_lr: default_max_lr(),
            betas: default_betas(),
            eps: default_eps(),
            weight_decay: default_weight_decay(),
            grad_clip: default_grad_clip(),
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.max_lr > 0.0 && self.max_lr.is_finite()) {
            return Err(Error::config(format!("optim.max_lr must be > 0, got {}", self.max_lr)));
        }
        if self.betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return Err(Error::config(format!("optim.betas must lie in [0, 1), got {:?}", self.betas)));
        }
        if !(self.eps > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::config("optim.eps must be > 0 and optim.weight_decay >= 0"));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::config("optim.grad_clip must be > 0 when set"));
        }
        Ok(())
    }
}

/// Per-parameter optimizer state, keyed as `<slot>.<parameter name>`.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<S> {
    pub steps: u64,
    pub tensors: Vec<(String, Tensor<S>)>,
}

pub trait Optimizer<S: Scalar>: Send {
    fn name(&self) -> &'static str;
    /// Applies one update in place. `lr` scales the whole update, including
    /// weight decay, so `lr == 0` leaves parameters untouched.
    fn step(&mut self, params: &mut ParamStore<S>, grads: &[Vec<S>], lr: f64) -> Result<()>;
    fn steps(&self) -> u64;
    fn export_state(&self, params: &ParamStore<S>) -> OptimizerState<S>;
    fn import_state(&mut self, params: &ParamStore<S>, state: OptimizerState<S>) -> Result<()>;
}

fn decays(params: &ParamStore<impl Scalar>, i: usize) -> bool {
    let spec = &params.specs()[i];
    spec.kind == ParamKind::Weight && spec.shape.len() == 2
}

fn check_grads<S: Scalar>(params: &ParamStore<S>, grads: &[Vec<S>]) -> Result<()> {
    if grads.len() != params.len() || grads.iter().zip(params.tensors()).any(|(g, t)| g.len() != t.data.len()) {
        return Err(Error::Shape("gradients do not match the parameter layout".into()));
    }
    Ok(())
}

pub struct AdamW<S> {
    cfg: OptimConfig,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
    t: u64,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(cfg: OptimConfig) -> Self {
        Self {
            cfg,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    fn ensure_state(&mut self, params: &ParamStore<S>) {
        if self.m.len() != params.len() {
            self.m = params.tensors().iter().map(|t| vec![S::zero(); t.data.len()]).collect();
            self.v = self.m.clone();
        }
    }
}

impl<S: Scalar> Optimizer<S> for AdamW<S> {
    fn name(&self) -> &'static str {
        "adamw"
    }

    fn step(&mut self, params: &mut ParamStore<S>, grads: &[Vec<S>], lr: f64) -> Result<()> {
        check_grads(params, grads)?;
        self.ensure_state(params);
        self.t += 1;
        let [b1, b2] = self.cfg.betas;
        let bc1 = 1.0 - b1.powi(self.t.min(i32::MAX as u64) as i32);
        let bc2 = 1.0 - b2.powi(self.t.min(i32::MAX as u64) as i32);
        let (s_b1, s_b2) = (S::of(b1), S::of(b2));
        let (s_1b1, s_1b2) = (S::of(1.0 - b1), S::of(1.0 - b2));
        let step_size = S::of(lr / bc1);
        let inv_sqrt_bc2 = S::of(1.0 / bc2.sqrt());
        let eps = S::of(self.cfg.eps);
        for i in 0..params.len() {
            let decay = if decays(params, i) { S::of(lr * self.cfg.weight_decay) } else { S::zero() };
            let w = &mut params.tensors_mut()[i].data;
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads[i]);
            for j in 0..w.len() {
                let wj = w[j];
                w[j] = wj - decay * wj;
                m[j] = s_b1 * m[j] + s_1b1 * g[j];
                v[j] = s_b2 * v[j] + s_1b2 * g[j] * g[j];
                w[j] -= step_size * m[j] / (v[j].sqrt() * inv_sqrt_bc2 + eps);
            }
        }
        Ok(())
    }

    fn steps(&self) -> u64 {
        self.t
    }

    fn export_state(&self, params: &ParamStore<S>) -> OptimizerState<S> {
        let mut tensors = Vec::new();
        for (slot, values) in [("m", &self.m), ("v", &self.v)] {
            for (spec, data) in params.specs().iter().zip(values.iter()) {
                tensors.push((
                    format!("{slot}.{}", spec.name),
                    Tensor {
                        shape: spec.shape.clone(),
                        data: data.clone(),
                    },
                ));
            }
        }
        OptimizerState { steps: self.t, tensors }
    }

    fn import_state(&mut self, params: &ParamStore<S>, state: OptimizerState<S>) -> Result<()> {
        self.ensure_state(params);
        if state.steps > 0 {
            for (name, t) in state.tensors {
                let (slot, pname) = name.split_once('.').ok_or_else(|| Error::Format {
                    what: "optimizer state",
                    detail: format!("bad tensor name {name}"),
                })?;
                let i = params.index_of(pname).ok_or_else(|| Error::Format {
                    what: "optimizer state",
                    detail: format!("unknown parameter {pname}"),
                })?;
                if t.data.len() != params.tensors()[i].data.len() {
                    return Err(Error::Shape(format!("optimizer state for {pname} has wrong size")));
                }
                match slot {
                    "m" => self.m[i] = t.data,
                    "v" => self.v[i] = t.data,
                    _ => {
                        return Err(Error::Format {
                            what: "optimizer state",
                            detail: format!("unknown slot {slot}"),
                        })
                    }
                }
            }
        }
        self.t = state.steps;
        Ok(())
    }
}

/// Plain gradient descent with the same decoupled decay rule.
pub struct Sgd {
    cfg: OptimConfig,
    t: u64,
}

impl Sgd {
    pub fn new(cfg: OptimConfig) -> Self {
        Self { cfg, t: 0 }
    }
}

impl<S: Scalar> Optimizer<S> for Sgd {
    fn name(&self) -> &'static str {
        "sgd"
    }

    fn step(&mut self, params: &mut ParamStore<S>, grads: &[Vec<S>], lr: f64) -> Result<()> {
        check_grads(params, grads)?;
        self.t += 1;
        let s_lr = S::of(lr);
        for (i, g) in grads.iter().enumerate() {
            let decay = if decays(params, i) { S::of(lr * self.cfg.weight_decay) } else { S::zero() };
            for (w, &g) in params.tensors_mut()[i].data.iter_mut().zip(g) {
                *w -= decay * *w;
                *w -= s_lr * g;
            }
        }
        Ok(())
    }

    fn steps(&self) -> u64 {
        self.t
    }

    fn export_state(&self, _params: &ParamStore<S>) -> OptimizerState<S> {
        OptimizerState {
            steps: self.t,
            tensors: Vec::new(),
        }
    }

    fn import_state(&mut self, _params: &ParamStore<S>, state: OptimizerState<S>) -> Result<()> {
        self.t = state.steps;
        Ok(())
    }
}

pub fn optimizers<S: Scalar>() -> Registry<dyn Optimizer<S>, OptimConfig> {
    let mut r: Registry<dyn Optimizer<S>, OptimConfig> = Registry::new("optimizer");
    r.register("adamw", |c: &OptimConfig| Ok(Box::new(AdamW::<S>::new(c.clone()))));
    r.register("sgd", |c: &OptimConfig| Ok(Box::new(Sgd::new(c.clone()))));
    r
}

/// Global L2 norm over all gradients, accumulated in `f64`.
pub fn global_norm<S: Scalar>(grads: &[Vec<S>]) -> f64 {
    grads.iter().flatten().map(|g| g.f64() * g.f64()).sum::<f64>().sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm<S: Scalar>(grads: &mut [Vec<S>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm.is_finite() {
        let scale = S::of(max_norm / norm);
        grads.iter_mut().flatten().for_each(|g| *g *= scale);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ParamSpec;

    fn store(values: &[f64]) -> ParamStore<f64> {
        let specs = vec![
            ParamSpec::new("w", &[1, values.len() - 1], ParamKind::Weight),
            ParamSpec::new("g", &[1], ParamKind::Gain),
        ];
        let n = values.len();
        ParamStore::from_tensors(
            specs,
            vec![
                Tensor {
                    shape: vec![1, n - 1],
                    data: values[..n - 1].to_vec(),
                },
                Tensor {
                    shape: vec![1],
                    data: vec![values[n - 1]],
                },
            ],
        )
        .unwrap()
    }

    #[test]
    fn zero_lr_is_a_no_op() {
        for name in ["adamw", "sgd"] {
            let mut opt = optimizers::<f64>().create(name, &OptimConfig::default()).unwrap();
            let mut p = store(&[0.5, -2.0, 1.0]);
            let before = p.clone();
            opt.step(&mut p, &[vec![1.0, -3.0], vec![0.7]], 0.0).unwrap();
            assert_eq!(p, before, "{name}");
        }
    }

    #[test]
    fn adamw_first_step_matches_hand_values() {
        let cfg = OptimConfig {
            weight_decay: 0.1,
            ..OptimConfig::default()
        };
        let mut opt = AdamW::<f64>::new(cfg);
        let mut p = store(&[1.0, 1.0]);
        opt.step(&mut p, &[vec![0.5], vec![0.5]], 0.01).unwrap();
        // Bias-corrected first step moves by lr * g / (|g| + eps') ~= lr.
        let adam = 0.01 * 0.5 / (0.5 + 1e-8);
        assert!((p.tensors()[0].data[0] - (1.0 - 0.01 * 0.1 - adam)).abs() < 1e-12);
        assert!((p.tensors()[1].data[0] - (1.0 - adam)).abs() < 1e-12);
    }

    #[test]
    fn state_round_trip() {
        let mut a = AdamW::<f64>::new(OptimConfig::default());
        let mut p = store(&[1.0, 2.0, 3.0]);
        a.step(&mut p, &[vec![0.1, 0.2], vec![0.3]], 0.1).unwrap();
        let mut b = AdamW::<f64>::new(OptimConfig::default());
        b.import_state(&p, a.export_state(&p)).unwrap();
        let mut pa = p.clone();
        let mut pb = p.clone();
        a.step(&mut pa, &[vec![0.4, 0.1], vec![-0.3]], 0.1).unwrap();
        b.step(&mut pb, &[vec![0.4, 0.1], vec![-0.3]], 0.1).unwrap();
        assert_eq!(pa, pb);
        assert!(optimizers::<f32>().create("lion", &OptimConfig::default()).is_err());
    }

    #[test]
    fn clipping() {
        let mut g = vec![vec![3.0f64], vec![4.0]];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-12);
        let mut small = vec![vec![0.3f64]];
        clip_grad_norm(&mut small, 1.0);
        assert_eq!(small[0][0], 0.3);
    }
}
