//! Optimization and the training schemes: single-task fine-tuning,
//! two-phase transfer and step-interleaved multi-task training.

pub mod adam;
pub mod runner;
pub mod schedule;

use serde::{Deserialize, Serialize};

pub use adam::Adam;
pub use runner::{
    early_stop_select, run_baseline, run_itft, run_mtl, slot_value_dropout, train_task, EpochRecord, ItftOutcome,
    RunInputs, Seeds, TrainOutcome,
};
pub use schedule::{lr_at, run_schedule, EpochPlan, LrSchedule, Task, UpdateRecord, Updater};

use crate::data::features::DST_MAX_LEN;
use crate::data::BATCH_SIZE;
use crate::error::{Error, Result};
use crate::heads::AuxHead;
use crate::model::HeadConfig;

/// Hyperparameters of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub e_max: usize,
    pub e_mtl: usize,
    pub lr: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_len: usize,
    pub slot_value_dropout: f64,
    pub heads: HeadConfig,
    /// First-phase overrides; `None` picks the default for the auxiliary
    /// task type.
    pub phase1_lr: Option<f64>,
    pub phase1_epochs: Option<usize>,
    pub phase1_max_len: Option<usize>,
    /// Input length for auxiliary examples during interleaved training.
    pub aux_max_len: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            e_max: 10,
            e_mtl: 7,
            lr: 1e-4,
            warmup_fraction: 0.10,
            weight_decay: 0.01,
            batch_size: BATCH_SIZE,
            max_len: DST_MAX_LEN,
            slot_value_dropout: 0.0,
            heads: HeadConfig::default(),
            phase1_lr: None,
            phase1_epochs: None,
            phase1_max_len: None,
            aux_max_len: None,
        }
    }
}

/// Slot value dropout rate used when it is switched on without a rate.
pub const DEFAULT_SLOT_VALUE_DROPOUT: f64 = 0.10;

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.e_mtl > self.e_max {
            problems.push(format!("e_mtl ({}) exceeds e_max ({})", self.e_mtl, self.e_max));
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            problems.push(format!("warmup_fraction {} outside (0, 1)", self.warmup_fraction));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            problems.push(format!("lr {} must be positive", self.lr));
        }
        if self.weight_decay < 0.0 {
            problems.push("weight_decay must be >= 0".into());
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.slot_value_dropout) {
            problems.push("slot_value_dropout outside [0, 1]".into());
        }
        if !(0.0..1.0).contains(&self.heads.dropout) {
            problems.push("head dropout outside [0, 1)".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// First-phase `(lr, epochs, max_len)` for an auxiliary head type.
    pub fn phase1(&self, head: AuxHead) -> (f64, usize, usize) {
        let (lr, epochs, max_len) = match head {
            AuxHead::Span => (5e-5, 2, crate::data::tasks::SPAN_MAX_LEN),
            AuxHead::Classification { .. } => (2e-5, 3, crate::data::tasks::CLS_MAX_LEN),
        };
        (
            self.phase1_lr.unwrap_or(lr),
            self.phase1_epochs.unwrap_or(epochs),
            self.phase1_max_len.unwrap_or(max_len),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_phase_one() {
        let c = TrainConfig::default();
        c.validate().unwrap();
        assert_eq!((c.e_max, c.e_mtl, c.max_len), (10, 7, 180));
        assert_eq!(c.phase1(AuxHead::Span), (5e-5, 2, 384));
        assert_eq!(c.phase1(AuxHead::Classification { num_classes: 2 }), (2e-5, 3, 128));
        let bad = TrainConfig {
            e_mtl: 11,
            warmup_fraction: 1.0,
            ..Default::default()
        };
        let msg = bad.validate().unwrap_err().to_string();
        assert!(msg.contains("e_mtl") && msg.contains("warmup"));
    }
}
