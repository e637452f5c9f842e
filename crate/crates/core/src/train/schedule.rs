//! Learning-rate schedule and the interleaved update scheduler.

use serde::{Deserialize, Serialize};

use crate::data::{Batch, TaskBatchStream};
use crate::error::{Error, Result};

/// Linear warmup from 0 to `lr_init` over the first
/// `ceil(warmup_fraction * total)` steps, then linear decay to 0 at `total`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub lr_init: f64,
    pub warmup_fraction: f64,
    pub total: u64,
}

impl LrSchedule {
    pub fn new(lr_init: f64, warmup_fraction: f64, total: u64) -> Result<Self> {
        if total == 0 {
            return Err(Error::Config("learning-rate schedule needs at least one step".into()));
        }
        if !(warmup_fraction > 0.0 && warmup_fraction < 1.0) {
            return Err(Error::Config(format!(
                "warmup fraction {warmup_fraction} outside (0, 1)"
            )));
        }
        if !(lr_init.is_finite() && lr_init >= 0.0) {
            return Err(Error::Config(format!("bad learning rate {lr_init}")));
        }
        Ok(LrSchedule {
            lr_init,
            warmup_fraction,
            total,
        })
    }

    pub fn warmup_steps(&self) -> u64 {
        // Guard against products like 0.1 * 30 = 3.0000000000000004.
        ((self.warmup_fraction * self.total as f64) - 1e-9).ceil().max(0.0) as u64
    }

    pub fn at(&self, step: u64) -> f64 {
        let w = self.warmup_steps();
        if step >= self.total {
            0.0
        } else if step < w {
            self.lr_init * step as f64 / w as f64
        } else {
            self.lr_init * (self.total - step) as f64 / (self.total - w) as f64
        }
    }
}

pub fn lr_at(step: u64, total: u64, lr_init: f64, warmup_fraction: f64) -> Result<f64> {
    if step > total {
        return Err(Error::Invalid(format!("step {step} beyond schedule of {total}")));
    }
    Ok(LrSchedule::new(lr_init, warmup_fraction, total)?.at(step))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Aux,
    Dst,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Aux => "aux",
            Task::Dst => "dst",
        }
    }
}

/// One optimizer update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateRecord {
    pub task: Task,
    /// 1-based.
    pub epoch: usize,
    /// 1-based target-task step within the epoch.
    pub step: usize,
    /// Resets of the stream the batch came from.
    pub pass: u64,
    pub batch: usize,
    pub loss: f64,
    pub lr: f64,
}

/// Applies one update per call and observes epoch boundaries.
pub trait Updater {
    fn update(&mut self, task: Task, batch: &Batch, lr: f64) -> Result<f64>;

    fn epoch_end(&mut self, _epoch: usize) -> Result<()> {
        Ok(())
    }
}

/// Epoch counts of a run. Auxiliary updates happen in epochs `1..=e_mtl`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochPlan {
    pub e_max: usize,
    pub e_mtl: usize,
}

impl EpochPlan {
    /// Optimizer updates in a run with `s_max` target steps per epoch.
    pub fn total_updates(&self, s_max: usize) -> u64 {
        (s_max * (self.e_max + self.e_mtl)) as u64
    }
}

/// Run the epoch/step loop. Each epoch takes `s_max = main.num_batches()`
/// steps; while `epoch <= e_mtl` every step first updates on the next
/// auxiliary batch (resetting the auxiliary stream after its last batch) and
/// then on the next main batch. The main stream resets at every epoch end.
/// Learning rates follow `lr` indexed by the global update count.
pub fn run_schedule<U: Updater>(
    plan: EpochPlan,
    main_task: Task,
    main: &mut TaskBatchStream,
    mut aux: Option<&mut TaskBatchStream>,
    lr: &LrSchedule,
    updater: &mut U,
) -> Result<Vec<UpdateRecord>> {
    if plan.e_mtl > plan.e_max {
        return Err(Error::Config(format!(
            "e_mtl ({}) exceeds e_max ({})",
            plan.e_mtl, plan.e_max
        )));
    }
    if plan.e_mtl > 0 && aux.is_none() {
        return Err(Error::Config("interleaved epochs need an auxiliary stream".into()));
    }
    let s_max = main.num_batches();
    let mut log = Vec::with_capacity(plan.total_updates(s_max) as usize);
    let mut updates = 0u64;
    let mut apply = |task: Task, epoch: usize, step: usize, batch: &Batch, updater: &mut U| -> Result<UpdateRecord> {
        let rate = lr.at(updates);
        let loss = updater.update(task, batch, rate)?;
        updates += 1;
        Ok(UpdateRecord {
            task,
            epoch,
            step,
            pass: batch.pass,
            batch: batch.index,
            loss,
            lr: rate,
        })
    };
    for epoch in 1..=plan.e_max {
        for step in 1..=s_max {
            if epoch <= plan.e_mtl {
                let stream = aux.as_deref_mut().expect("checked above");
                let batch = stream
                    .next_batch()
                    .ok_or_else(|| Error::Invalid("auxiliary stream exhausted without reset".into()))?;
                log.push(apply(Task::Aux, epoch, step, &batch, updater)?);
                if batch.last {
                    stream.reset();
                }
            }
            let batch = main
                .next_batch()
                .ok_or_else(|| Error::Invalid("main stream exhausted mid-epoch".into()))?;
            log.push(apply(main_task, epoch, step, &batch, updater)?);
        }
        main.reset();
        updater.epoch_end(epoch)?;
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Null;
    impl Updater for Null {
        fn update(&mut self, _: Task, _: &Batch, _: f64) -> Result<f64> {
            Ok(0.0)
        }
    }

    #[test]
    fn closed_form_points() {
        let lr = LrSchedule::new(1.0, 0.1, 1000).unwrap();
        assert_eq!(lr.warmup_steps(), 100);
        assert!((lr.at(50) - 0.5).abs() < 1e-12);
        assert!((lr.at(100) - 1.0).abs() < 1e-12);
        assert!((lr.at(550) - 0.5).abs() < 1e-12);
        assert_eq!(lr.at(0), 0.0);
        assert_eq!(lr.at(1000), 0.0);
        assert_eq!(LrSchedule::new(1.0, 0.1, 30).unwrap().warmup_steps(), 3);
        assert!(lr_at(0, 0, 1e-4, 0.1).is_err());
        assert!(LrSchedule::new(1.0, 0.0, 10).is_err());
    }

    #[test]
    fn traced_example() {
        let mut main = TaskBatchStream::new(2, 1, 0).unwrap();
        let mut aux = TaskBatchStream::new(3, 1, 1).unwrap();
        let lr = LrSchedule::new(1e-4, 0.1, 10).unwrap();
        let log = run_schedule(
            EpochPlan { e_max: 3, e_mtl: 2 },
            Task::Dst,
            &mut main,
            Some(&mut aux),
            &lr,
            &mut Null,
        )
        .unwrap();
        let seq: Vec<String> = log
            .iter()
            .map(|r| {
                format!(
                    "{}{}{}",
                    &r.task.as_str()[..1],
                    r.batch + 1,
                    "'".repeat(r.pass as usize)
                )
            })
            .collect();
        assert_eq!(seq, ["a1", "d1", "a2", "d2", "a3", "d1'", "a1'", "d2'", "d1''", "d2''"]);
    }
}
