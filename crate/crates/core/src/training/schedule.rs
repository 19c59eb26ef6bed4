use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear warmup followed by cosine decay to `min_lr`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    #[serde(default = "default_warmup")]
    pub warmup_steps: u64,
    /// 0 means "derive from the data and epoch count".
    #[serde(default)]
    pub total_steps: u64,
    #[serde(default)]
    pub min_lr: f64,
}

fn default_warmup() -> u64 {
    200
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            warmup_steps: default_warmup(),
            total_steps: 0,
            min_lr: 0.0,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self, max_lr: f64) -> Result<()> {
        if self.warmup_steps > self.total_steps {
            return Err(Error::config(format!(
                "schedule.warmup_steps ({}) exceeds schedule.total_steps ({})",
                self.warmup_steps, self.total_steps
            )));
        }
        if !(self.min_lr >= 0.0 && self.min_lr <= max_lr) {
            return Err(Error::config(format!("schedule.min_lr must lie in [0, max_lr], got {}", self.min_lr)));
        }
        Ok(())
    }
}

/// Learning rate at `step`; steps past `total_steps` clamp to `min_lr`.
pub fn lr_at(schedule: &ScheduleConfig, max_lr: f64, step: u64) -> f64 {
    let ScheduleConfig {
        warmup_steps: warmup,
        total_steps: total,
        min_lr,
    } = *schedule;
    if step > total {
        return min_lr;
    }
    if step < warmup {
        return max_lr * step as f64 / warmup as f64;
    }
    if step == warmup || total == warmup {
        return max_lr;
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    min_lr + 0.5 * (max_lr - min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sched(warmup: u64, total: u64, min_lr: f64) -> ScheduleConfig {
        ScheduleConfig {
            warmup_steps: warmup,
            total_steps: total,
            min_lr,
        }
    }

    #[test]
    fn reference_points() {
        let s = sched(200, 1000, 1e-5);
        let max = 3e-4;
        assert_eq!(lr_at(&s, max, 0), 0.0);
        assert_eq!(lr_at(&s, max, 100), 0.5 * max);
        assert_eq!(lr_at(&s, max, 200), max);
        assert!((lr_at(&s, max, 600) - (1e-5 + 0.5 * (max - 1e-5))).abs() < 1e-18);
        assert!((lr_at(&s, max, 1000) - 1e-5).abs() < 1e-18);
        assert_eq!(lr_at(&s, max, 5000), 1e-5);
        assert!(s.validate(max).is_ok());
        assert!(sched(10, 5, 0.0).validate(max).is_err());
    }

    proptest! {
        #[test]
        fn monotone_after_warmup(warmup in 0u64..300, extra in 1u64..3000, max in 1e-6f64..1.0, frac in 0.0f64..1.0) {
            let s = sched(warmup, warmup + extra, max * frac);
            let edge = lr_at(&s, max, warmup + 1);
            prop_assert!((lr_at(&s, max, warmup) - edge).abs() <= max * (1.0 - (std::f64::consts::PI / extra as f64).cos()) + 1e-15);
            let mut prev = lr_at(&s, max, warmup);
            for step in warmup..=warmup + extra + 2 {
                let lr = lr_at(&s, max, step);
                prop_assert!(lr <= prev + 1e-18);
                prev = lr;
            }
        }
    }
}
