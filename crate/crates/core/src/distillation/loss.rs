//! Cross-entropy, temperature softmax, logit ensembling and the hybrid
//! distillation loss `alpha * CE + (1 - alpha) * KL`.
//!
//! Logits are flat `[rows, vocab]` buffers. `targets[r]` is the next-token
//! id for row `r`, or `None` for rows that are not scored (the last position
//! of each chunk). Loss values are accumulated in `f64`; every loss returns
//! its gradient with respect to the logits alongside the value.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{log_sum_exp, softmax_in_place, Scalar};

/// Components of one loss evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub ce: f64,
    /// Unscaled `KL(teacher || student_T)`, mean per scored token.
    pub kl: f64,
}

/// Temperature-softened distributions, `[rows, vocab]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftTargets<S> {
    pub probs: Vec<S>,
    pub vocab: usize,
}

impl<S: Scalar> SoftTargets<S> {
    pub fn rows(&self) -> usize {
        self.probs.len() / self.vocab
    }
}

fn check_rows<S>(logits: &[S], vocab: usize) -> Result<usize> {
    if vocab == 0 || logits.len() % vocab != 0 {
        return Err(Error::Shape(format!("{} logits do not split into rows of {vocab}", logits.len())));
    }
    Ok(logits.len() / vocab)
}

/// Row-wise `softmax(logits / T)`.
pub fn temperature_softmax<S: Scalar>(logits: &[S], vocab: usize, temperature: f64) -> Result<SoftTargets<S>> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::config(format!("temperature must be > 0, got {temperature}")));
    }
    check_rows(logits, vocab)?;
    let inv_t = S::of(1.0 / temperature);
    let mut probs: Vec<S> = logits.iter().map(|&z| z * inv_t).collect();
    for row in probs.chunks_exact_mut(vocab) {
        softmax_in_place(row);
    }
    Ok(SoftTargets { probs, vocab })
}

/// Elementwise mean of equally shaped logit tensors.
///
/// Computed as `x_0 + Σ_i (x_i - x_0) / n`, which is exact when all members
/// agree, so an ensemble of identical models reproduces the single model
/// bit for bit.
pub fn ensemble_logits<S: Scalar>(members: &[Vec<S>]) -> Result<Vec<S>> {
    let first = members.first().ok_or_else(|| Error::Degenerate("ensemble of zero models".into()))?;
    if let Some(bad) = members.iter().find(|m| m.len() != first.len()) {
        return Err(Error::Shape(format!("ensemble members of {} and {} elements", first.len(), bad.len())));
    }
    let inv_n = S::one() / S::of(members.len() as f64);
    let mut out = first.clone();
    for (j, o) in out.iter_mut().enumerate() {
        let mut delta = S::zero();
        for m in &members[1..] {
            delta += m[j] - first[j];
        }
        *o += delta * inv_n;
    }
    Ok(out)
}

/// Mean next-token cross-entropy over scored rows and its logit gradient.
pub fn cross_entropy<S: Scalar>(logits: &[S], vocab: usize, targets: &[Option<u32>]) -> Result<(f64, Vec<S>)> {
    let rows = check_rows(logits, vocab)?;
    if targets.len() != rows {
        return Err(Error::Shape(format!("{} targets for {rows} rows", targets.len())));
    }
    let n = targets.iter().filter(|t| t.is_some()).count();
    if n == 0 {
        return Err(Error::Degenerate("no scored positions".into()));
    }
    let inv_n = S::of(1.0 / n as f64);
    let mut grad = vec![S::zero(); logits.len()];
    let mut total = 0.0f64;
    for ((row, g), t) in logits.chunks_exact(vocab).zip(grad.chunks_exact_mut(vocab)).zip(targets) {
        let Some(t) = *t else { continue };
        let t = t as usize;
        if t >= vocab {
            return Err(Error::TokenOutOfRange { id: t as u32, vocab });
        }
        let lse = log_sum_exp(row);
        total += (lse - row[t]).f64();
        for (gv, &z) in g.iter_mut().zip(row) {
            *gv = (z - lse).exp() * inv_n;
        }
        g[t] -= inv_n;
    }
    Ok((total / n as f64, grad))
}

/// Hyperparameters of the hybrid loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KdWeights {
    pub alpha: f64,
    pub temperature: f64,
    pub scale_kl_by_t2: bool,
}

impl Default for KdWeights {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            temperature: 2.0,
            scale_kl_by_t2: true,
        }
    }
}

impl KdWeights {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::config(format!("temperature must be > 0, got {}", self.temperature)));
        }
        Ok(())
    }

    /// Multiplier applied to the KL term inside the total.
    pub fn kl_scale(&self) -> f64 {
        if self.scale_kl_by_t2 {
            self.temperature * self.temperature
        } else {
            1.0
        }
    }
}

/// `alpha * CE(student, hard) + (1 - alpha) * s * KL(teacher_soft || softmax(student / T))`
/// with `s = T²` when `scale_kl_by_t2`, plus the gradient with respect to the
/// student logits.
pub fn kd_loss<S: Scalar>(student_logits: &[S], teacher_soft: &SoftTargets<S>, targets: &[Option<u32>], w: &KdWeights) -> Result<(LossBreakdown, Vec<S>)> {
    w.validate()?;
    let vocab = teacher_soft.vocab;
    let rows = check_rows(student_logits, vocab)?;
    if teacher_soft.probs.len() != student_logits.len() {
        return Err(Error::Shape(format!(
            "student logits ({}) and soft targets ({}) differ in size",
            student_logits.len(),
            teacher_soft.probs.len()
        )));
    }
    let (ce, ce_grad) = cross_entropy(student_logits, vocab, targets)?;
    let n = targets.iter().filter(|t| t.is_some()).count();
    let t = w.temperature;
    let inv_t = S::of(1.0 / t);
    let kl_weight = (1.0 - w.alpha) * w.kl_scale();
    let kl_coeff = S::of(kl_weight / (t * n as f64));
    let alpha = S::of(w.alpha);

    let mut grad: Vec<S> = ce_grad.iter().map(|&g| alpha * g).collect();
    let mut kl_total = 0.0f64;
    let mut scaled = vec![S::zero(); vocab];
    for r in 0..rows {
        if targets[r].is_none() {
            continue;
        }
        let z = &student_logits[r * vocab..(r + 1) * vocab];
        let p = &teacher_soft.probs[r * vocab..(r + 1) * vocab];
        for (s, &zv) in scaled.iter_mut().zip(z) {
            *s = zv * inv_t;
        }
        let lse = log_sum_exp(&scaled);
        let mut kl_row = 0.0f64;
        let g = &mut grad[r * vocab..(r + 1) * vocab];
        for j in 0..vocab {
            let log_q = scaled[j] - lse;
            if p[j] > S::zero() {
                kl_row += (p[j] * (p[j].ln() - log_q)).f64();
            }
            g[j] += kl_coeff * (log_q.exp() - p[j]);
        }
        kl_total += kl_row;
    }
    let kl = kl_total / n as f64;
    Ok((
        LossBreakdown {
            total: w.alpha * ce + kl_weight * kl,
            ce,
            kl,
        },
        grad,
    ))
}

/// Next-token targets for `[batch, seq]` chunks: row `(b, t)` predicts
/// `tokens[b, t + 1]`; the final position of each chunk is unscored.
pub fn next_token_targets(tokens: &[u32], batch: usize, seq: usize) -> Vec<Option<u32>> {
    debug_assert_eq!(tokens.len(), batch * seq);
    (0..batch * seq)
        .map(|r| if r % seq + 1 < seq { Some(tokens[r + 1]) } else { None })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn temperature_softmax_closed_forms() {
        let s = temperature_softmax(&[2.0f64, 0.0], 2, 2.0).unwrap();
        let e = std::f64::consts::E;
        assert!((s.probs[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((s.probs[1] - 1.0 / (e + 1.0)).abs() < 1e-15);
        assert!((s.probs[0] - 0.7311).abs() < 1e-4);
        for t in [0.1, 1.0, 7.0] {
            assert_eq!(temperature_softmax(&[0.0f64, 0.0], 2, t).unwrap().probs, vec![0.5, 0.5]);
        }
        assert!(temperature_softmax(&[1.0f64], 1, 0.0).is_err());
        assert!(temperature_softmax(&[1.0f64], 1, -1.0).is_err());
    }

    #[test]
    fn ensemble_edge_cases() {
        let x = vec![1.5f64, -2.0, 0.25];
        assert_eq!(ensemble_logits(&[x.clone()]).unwrap(), x);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert_eq!(ensemble_logits(&[x.clone(), neg]).unwrap(), vec![0.0; 3]);
        assert_eq!(ensemble_logits(&vec![x.clone(); 3]).unwrap(), x);
        assert!(ensemble_logits::<f64>(&[]).is_err());
        assert!(ensemble_logits(&[x, vec![1.0]]).is_err());
    }

    #[test]
    fn vocab_two_kl_hand_value() {
        let soft = SoftTargets {
            probs: vec![0.75f64, 0.25],
            vocab: 2,
        };
        let w = KdWeights {
            alpha: 0.0,
            temperature: 1.0,
            scale_kl_by_t2: true,
        };
        let (l, _) = kd_loss(&[0.0f64, 0.0], &soft, &[Some(0)], &w).unwrap();
        let expected = 0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln();
        assert!((l.total - expected).abs() < 1e-15);
        assert!((l.total - 0.1308).abs() < 1e-4);
    }

    #[test]
    fn alpha_out_of_range_rejected() {
        let soft = SoftTargets {
            probs: vec![0.5f64, 0.5],
            vocab: 2,
        };
        for alpha in [-0.1, 1.5] {
            let w = KdWeights {
                alpha,
                ..KdWeights::default()
            };
            assert!(kd_loss(&[0.0f64, 0.0], &soft, &[Some(0)], &w).is_err());
        }
    }

    #[test]
    fn next_token_targets_shift_within_chunk() {
        let t = next_token_targets(&[1, 2, 3, 4, 5, 6], 2, 3);
        assert_eq!(t, vec![Some(2), Some(3), None, Some(5), Some(6), None]);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let vocab = 5;
        let z: Vec<f64> = (0..15).map(|i| ((i * 13 % 7) as f64 - 3.0) / 2.0).collect();
        let teacher: Vec<f64> = (0..15).map(|i| ((i * 5 % 11) as f64 - 5.0) / 3.0).collect();
        let soft = temperature_softmax(&teacher, vocab, 2.0).unwrap();
        let targets = vec![Some(1), None, Some(4)];
        let w = KdWeights::default();
        let (_, grad) = kd_loss(&z, &soft, &targets, &w).unwrap();
        let eps = 1e-6;
        for i in 0..z.len() {
            let mut zp = z.clone();
            zp[i] += eps;
            let mut zm = z.clone();
            zm[i] -= eps;
            let fd = (kd_loss(&zp, &soft, &targets, &w).unwrap().0.total - kd_loss(&zm, &soft, &targets, &w).unwrap().0.total) / (2.0 * eps);
            assert!((fd - grad[i]).abs() < 1e-8, "{i}: {fd} vs {}", grad[i]);
        }
    }
}
