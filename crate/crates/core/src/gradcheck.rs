//! Central finite-difference verification of model gradients.

use crate::error::Result;
use crate::model::Model;
use crate::training::Objective;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Relative error with a denominator floor, so that gradients that are
/// zero up to rounding do not dominate the comparison.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_FLOOR: f64 = 1e-6;

/// Compares the analytic gradient of `objective` (plus any auxiliary loss)
/// with central differences for every parameter element.
pub fn check_gradients(model: &Model<f64>, tokens: &[u32], batch: usize, seq: usize, objective: &dyn Objective<f64>, step: f64, floor: f64) -> Result<GradCheckReport> {
    let loss_at = |m: &Model<f64>| -> Result<f64> {
        let (lb, aux, _) = m.loss_and_grads(tokens, batch, seq, |l| objective.loss(tokens, batch, seq, l))?;
        Ok(lb.total + aux)
    };
    let (_, _, grads) = model.loss_and_grads(tokens, batch, seq, |l| objective.loss(tokens, batch, seq, l))?;
    let mut probe = model.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for (p, g) in grads.iter().enumerate() {
        for j in 0..g.len() {
            let orig = probe.params().tensors()[p].data[j];
            probe.params_mut().tensors_mut()[p].data[j] = orig + step;
            let up = loss_at(&probe)?;
            probe.params_mut().tensors_mut()[p].data[j] = orig - step;
            let down = loss_at(&probe)?;
            probe.params_mut().tensors_mut()[p].data[j] = orig;
            let numeric = (up - down) / (2.0 * step);
            let err = relative_error(g[j], numeric, floor);
            report.checked += 1;
            if err > report.max_rel_error {
                report = GradCheckReport {
                    max_rel_error: err,
                    worst_param: model.params().specs()[p].name.clone(),
                    worst_index: j,
                    analytic: g[j],
                    numeric,
                    checked: report.checked,
                };
            }
        }
    }
    Ok(report)
}
