//! Triangular learning-rate schedule with per-group multipliers.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Parameter groups and their default learning-rate multipliers.
pub const DEFAULT_GROUPS: [(&str, f64); 4] = [("kar", 1.0), ("below_kb", 0.25), ("above_kb", 0.5), ("encoder", 1.0)];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    /// Peak learning rate.
    pub lr: f64,
    /// Fraction of `total_steps` spent warming up.
    pub warmup: f64,
    pub total_steps: usize,
    pub multipliers: BTreeMap<String, f64>,
    /// Relative sampling weight of unlabeled batches.
    pub unlabeled_weight: u32,
    /// Relative sampling weight of entity-linking batches.
    pub supervised_weight: u32,
    pub batch_size: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            warmup: 0.1,
            total_steps: 1000,
            multipliers: DEFAULT_GROUPS.iter().map(|&(g, m)| (g.to_string(), m)).collect(),
            unlabeled_weight: 4,
            supervised_weight: 1,
            batch_size: 8,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.warmup) {
            return Err(Error::Config(format!("warmup fraction {} outside [0, 1]", self.warmup)));
        }
        if self.total_steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("total_steps and batch_size must be positive".into()));
        }
        if let Some((g, m)) = self.multipliers.iter().find(|(_, m)| !(m.is_finite() && **m > 0.0)) {
            return Err(Error::Config(format!("multiplier for group `{g}` must be positive, got {m}")));
        }
        if self.unlabeled_weight + self.supervised_weight == 0 {
            return Err(Error::Config("sampling weights are both zero".into()));
        }
        Ok(())
    }

    fn warmup_steps(&self) -> f64 {
        self.warmup * self.total_steps as f64
    }

    /// `lr · m_group · f(step)`, where `f` rises linearly from 0 at step 0 to
    /// 1 at the end of warmup and falls linearly to 0 at `total_steps`.
    pub fn lr_at(&self, step: usize, group: &str) -> Result<f64> {
        let m = *self
            .multipliers
            .get(group)
            .ok_or_else(|| Error::UnknownGroup(group.to_string()))?;
        if step > self.total_steps {
            return Err(Error::OutOfRange {
                what: "schedule step",
                index: step,
                limit: self.total_steps,
            });
        }
        let s = step as f64;
        let w = self.warmup_steps();
        let total = self.total_steps as f64;
        let f = if s < w {
            s / w
        } else if total > w {
            (total - s) / (total - w)
        } else {
            1.0
        };
        Ok(self.lr * m * f)
    }

    /// Probability that a batch is drawn from the unlabeled corpus.
    pub fn unlabeled_fraction(&self) -> f64 {
        f64::from(self.unlabeled_weight) / f64::from(self.unlabeled_weight + self.supervised_weight)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched() -> ScheduleConfig {
        ScheduleConfig {
            total_steps: 100,
            ..Default::default()
        }
    }

    #[test]
    fn endpoints_are_zero_and_peak_is_lr() {
        let s = sched();
        assert_eq!(s.lr_at(0, "kar").unwrap(), 0.0);
        assert_eq!(s.lr_at(100, "kar").unwrap(), 0.0);
        assert_eq!(s.lr_at(10, "kar").unwrap(), 1e-3);
    }

    #[test]
    fn mid_decay_below_kb() {
        let s = sched();
        // 55 is halfway through the 90 decay steps
        let expect = 0.25 * 1e-3 * (45.0 / 90.0);
        assert!((s.lr_at(55, "below_kb").unwrap() - expect).abs() < 1e-18);
        assert!((s.lr_at(5, "above_kb").unwrap() - 0.5 * 1e-3 * 0.5).abs() < 1e-18);
    }

    #[test]
    fn unknown_group_and_overrun_rejected() {
        let s = sched();
        assert!(matches!(s.lr_at(1, "decoder"), Err(Error::UnknownGroup(_))));
        assert!(s.lr_at(101, "kar").is_err());
    }

    #[test]
    fn non_positive_multiplier_rejected() {
        let mut s = sched();
        s.multipliers.insert("kar".into(), 0.0);
        assert!(s.validate().is_err());
    }
}
