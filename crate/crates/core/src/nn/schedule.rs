use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear warmup from zero followed by step decay at fixed milestones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f32,
    pub warmup_iters: usize,
    pub decay_milestones: Vec<usize>,
    pub decay_factor: f32,
}

impl LrSchedule {
    pub fn constant(base_lr: f32) -> Self {
        Self {
            base_lr,
            warmup_iters: 0,
            decay_milestones: Vec::new(),
            decay_factor: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) || !self.base_lr.is_finite() {
            return Err(Error::Config(format!("base_lr {} must be > 0", self.base_lr)));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::Config(format!(
                "decay_factor {} outside (0, 1]",
                self.decay_factor
            )));
        }
        if self.decay_milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "milestones {:?} not strictly increasing",
                self.decay_milestones
            )));
        }
        Ok(())
    }

    /// Learning rate used for the update at iteration `iter` (0-based).
    pub fn lr_at(&self, iter: usize) -> f32 {
        let passed = self
            .decay_milestones
            .iter()
            .take_while(|&&m| iter >= m)
            .count();
        let lr = self.base_lr * self.decay_factor.powi(passed as i32);
        if iter < self.warmup_iters {
            lr * (iter + 1) as f32 / self.warmup_iters as f32
        } else {
            lr
        }
    }
}

/// Free-function form of [`LrSchedule::lr_at`].
pub fn lr_at(schedule: &LrSchedule, iter: usize) -> f32 {
    schedule.lr_at(iter)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_is_linear() {
        let s = LrSchedule {
            base_lr: 0.1,
            warmup_iters: 100,
            decay_milestones: vec![],
            decay_factor: 1.0,
        };
        assert!((s.lr_at(49) - 0.05).abs() < 1e-7);
        assert!((s.lr_at(99) - 0.1).abs() < 1e-7);
        assert_eq!(s.lr_at(5000), 0.1);
    }

    #[test]
    fn decays_after_milestone() {
        let s = LrSchedule {
            base_lr: 0.1,
            warmup_iters: 0,
            decay_milestones: vec![8000],
            decay_factor: 0.1,
        };
        assert_eq!(s.lr_at(7999), 0.1);
        assert!((s.lr_at(8001) - 0.01).abs() < 1e-8);
    }

    #[test]
    fn unit_factor_is_identity() {
        let s = LrSchedule {
            base_lr: 0.3,
            warmup_iters: 0,
            decay_milestones: vec![10, 20],
            decay_factor: 1.0,
        };
        assert_eq!(s.lr_at(100), 0.3);
    }

    #[test]
    fn rejects_bad_schedules() {
        let mut s = LrSchedule::constant(0.1);
        s.decay_milestones = vec![5, 5];
        assert!(s.validate().is_err());
        assert!(LrSchedule::constant(0.0).validate().is_err());
        let mut s = LrSchedule::constant(0.1);
        s.decay_factor = 1.5;
        assert!(s.validate().is_err());
    }
}
