use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Warm-up followed by step decays, with boundaries given in epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub lr_floor: f64,
    pub lr_peak: f64,
    pub warmup_epochs: usize,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub epochs: usize,
    pub steps_per_epoch: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            lr_floor: 1e-6,
            lr_peak: 2e-3,
            warmup_epochs: 5,
            decay_epochs: vec![100, 140],
            decay_factor: 0.1,
            epochs: 160,
            steps_per_epoch: 1,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        let mut prev = self.warmup_epochs;
        for (i, &d) in self.decay_epochs.iter().enumerate() {
            if d <= prev {
                return Err(Error::config(
                    "train.decay_epochs",
                    format!("decay {} at epoch {d} does not follow epoch {prev}", i + 1),
                ));
            }
            prev = d;
        }
        if prev > self.epochs {
            return Err(Error::config("train.epochs", "decays must not come after the last epoch"));
        }
        if self.steps_per_epoch == 0 {
            return Err(Error::config("train.batch_size", "an epoch needs at least one step"));
        }
        if !(self.lr_floor > 0.0 && self.lr_floor <= self.lr_peak) {
            return Err(Error::config("train.lr_floor", "need 0 < lr_floor <= lr_peak"));
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }

    /// Rescales the epoch boundaries onto `epochs` keeping their ratios.
    pub fn rescaled(&self, epochs: usize) -> Schedule {
        let scale = |e: usize| ((e as f64 * epochs as f64 / self.epochs as f64).round() as usize).max(1);
        Schedule {
            warmup_epochs: scale(self.warmup_epochs),
            decay_epochs: self.decay_epochs.iter().map(|&d| scale(d)).collect(),
            epochs,
            ..self.clone()
        }
    }
}

/// Learning rate at optimizer step `step`.
pub fn lr_at(step: usize, s: &Schedule) -> f64 {
    let warmup = s.warmup_epochs * s.steps_per_epoch;
    if step < warmup {
        return s.lr_floor + (s.lr_peak - s.lr_floor) * step as f64 / warmup as f64;
    }
    let decays = s
        .decay_epochs
        .iter()
        .filter(|&&d| step >= d * s.steps_per_epoch)
        .count();
    s.lr_peak * s.decay_factor.powi(decays as i32)
}
