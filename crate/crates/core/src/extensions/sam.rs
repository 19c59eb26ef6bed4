//! Sharpness-aware minimization: gradient at `w + rho * g / ||g||`, update at `w`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::tensor::Scalar;
use crate::training::optim::{clip_grad_norm, global_norm, Optimizer};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamConfig {
    #[serde(default = "default_rho")]
    pub rho: f64,
    /// Extra epochs trained with SAM after the conventional ones.
    #[serde(default = "default_applied_epochs")]
    pub applied_epochs: u64,
}

fn default_rho() -> f64 {
    0.05
}
fn default_applied_epochs() -> u64 {
    1
}

impl Default for SamConfig {
    fn default() -> Self {
        Self {
            rho: default_rho(),
            applied_epochs: default_applied_epochs(),
        }
    }
}

impl SamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(Error::config(format!("sam.rho must be > 0, got {}", self.rho)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamOutcome {
    /// Norm of the gradient at the unperturbed point.
    pub grad_norm: f64,
    /// True when the gradient vanished and a plain step was taken.
    pub fell_back: bool,
}

/// One SAM update. `loss_fn` returns a loss value and per-parameter
/// gradients at the given point; the returned value is the one at `params`.
///
/// A zero gradient norm gives no perturbation direction, so the base step is
/// applied with the unperturbed gradient instead. Clipping, when requested,
/// applies to the gradient actually used for the update.
pub fn sam_step<S, L, F>(params: &mut ParamStore<S>, mut loss_fn: F, optim: &mut dyn Optimizer<S>, rho: f64, lr: f64, clip: Option<f64>) -> Result<(L, SamOutcome)>
where
    S: Scalar,
    F: FnMut(&ParamStore<S>) -> Result<(L, Vec<Vec<S>>)>,
{
    if !(rho >= 0.0) {
        return Err(Error::config(format!("sam rho must be >= 0, got {rho}")));
    }
    let (value, mut grads) = loss_fn(params)?;
    let norm = global_norm(&grads);
    let fell_back = !(norm > 0.0);
    if !fell_back {
        let scale = S::of(rho / norm);
        let mut perturbed = params.clone();
        for (t, g) in perturbed.tensors_mut().iter_mut().zip(&grads) {
            for (w, &g) in t.data.iter_mut().zip(g) {
                *w += scale * g;
            }
        }
        grads = loss_fn(&perturbed)?.1;
    }
    if let Some(c) = clip {
        clip_grad_norm(&mut grads, c);
    }
    optim.step(params, &grads, lr)?;
    Ok((value, SamOutcome { grad_norm: norm, fell_back }))
}
