use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

/// Linear warmup, flat plateau, exponential tail.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub peak_lr: f64,
    pub total_updates: u64,
    pub warmup_frac: f64,
    pub constant_frac: f64,
    pub decay_frac: f64,
    pub final_lr_ratio: f64,
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        let fracs = [self.warmup_frac, self.constant_frac, self.decay_frac];
        if fracs.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(config_err("schedule fractions must lie in [0, 1]"));
        }
        if (fracs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(config_err("warmup_frac + constant_frac + decay_frac must equal 1"));
        }
        if !(self.peak_lr > 0.0) || !(self.final_lr_ratio > 0.0 && self.final_lr_ratio <= 1.0) {
            return Err(config_err("peak_lr must be positive and final_lr_ratio in (0, 1]"));
        }
        Ok(())
    }
}

pub fn lr_at(step: u64, s: &LrSchedule) -> f64 {
    lr_at_real(step as f64, s)
}

/// [`lr_at`] on a continuous step axis.
pub fn lr_at_real(step: f64, s: &LrSchedule) -> f64 {
    let total = s.total_updates as f64;
    let warm_end = s.warmup_frac * total;
    let flat_end = (s.warmup_frac + s.constant_frac) * total;
    if step < warm_end {
        s.peak_lr * step / warm_end
    } else if step <= flat_end || total <= flat_end {
        s.peak_lr
    } else {
        let frac = ((step - flat_end) / (total - flat_end)).min(1.0);
        s.peak_lr * s.final_lr_ratio.powf(frac)
    }
}
