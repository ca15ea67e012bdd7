use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    WarmupCosine,
    WarmupConstant,
}

/// Learning-rate schedule: linear warmup, then cosine decay to `floor` (experts)
/// or a constant rate (routers).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub warmup: u64,
    pub peak: f64,
    pub total: u64,
    pub floor: f64,
}

impl ScheduleConfig {
    pub fn warmup_cosine(warmup: u64, peak: f64, total: u64, floor: f64) -> Self {
        Self { kind: ScheduleKind::WarmupCosine, warmup, peak, total, floor }
    }

    pub fn warmup_constant(warmup: u64, peak: f64) -> Self {
        Self { kind: ScheduleKind::WarmupConstant, warmup, peak, total: 0, floor: peak }
    }

    /// Expert schedule used at full scale: 3,000 warmup steps to 5e-4, cosine to zero.
    pub fn expert_default(total: u64) -> Self {
        Self::warmup_cosine(3_000, 5e-4, total, 0.0)
    }

    /// Router schedule used at full scale: 1,000 warmup steps, then 1e-4.
    pub fn router_default() -> Self {
        Self::warmup_constant(1_000, 1e-4)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.peak > 0.0) {
            return Err(Error::invalid(format!("peak rate must be positive, got {}", self.peak)));
        }
        if self.kind == ScheduleKind::WarmupCosine && self.total <= self.warmup {
            return Err(Error::invalid(format!(
                "cosine schedule needs total steps ({}) above warmup ({})",
                self.total, self.warmup
            )));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup {
            return self.peak * (step + 1) as f64 / self.warmup as f64;
        }
        match self.kind {
            ScheduleKind::WarmupConstant => self.peak,
            ScheduleKind::WarmupCosine => {
                let span = (self.total - self.warmup) as f64;
                let progress = ((step - self.warmup) as f64 / span).min(1.0);
                self.floor + 0.5 * (self.peak - self.floor) * (1.0 + (PI * progress).cos())
            }
        }
    }
}
