use outtask::data::{Batch, TaskBatchStream};
use outtask::train::{run_schedule, EpochPlan, LrSchedule, Task, UpdateRecord, Updater};
use outtask::Result;
use proptest::prelude::*;

struct Recorder(Vec<(Task, Vec<usize>)>);

impl Updater for Recorder {
    fn update(&mut self, task: Task, batch: &Batch, _: f64) -> Result<f64> {
        self.0.push((task, batch.items.clone()));
        Ok(0.0)
    }
}

/// Closed-form update sequence: in epoch `e`, step `s` the main batch is
/// batch `s - 1` of pass `e - 1`; the `k`-th auxiliary update takes batch
/// `k mod n_aux` of pass `k div n_aux`.
fn interpret(
    s_max: usize,
    n_aux: usize,
    plan: EpochPlan,
    lr: &LrSchedule,
) -> Vec<(Task, usize, usize, u64, usize, f64)> {
    let mut out = Vec::new();
    let mut k = 0;
    for e in 1..=plan.e_max {
        for s in 1..=s_max {
            if e <= plan.e_mtl {
                out.push((Task::Aux, e, s, (k / n_aux) as u64, k % n_aux, 0.0));
                k += 1;
            }
            out.push((Task::Dst, e, s, (e - 1) as u64, s - 1, 0.0));
        }
    }
    for (i, r) in out.iter_mut().enumerate() {
        r.5 = lr.at(i as u64);
    }
    out
}

fn flatten(log: &[UpdateRecord]) -> Vec<(Task, usize, usize, u64, usize, f64)> {
    log.iter()
        .map(|r| (r.task, r.epoch, r.step, r.pass, r.batch, r.lr))
        .collect()
}

fn config() -> impl Strategy<Value = (usize, usize, usize, usize, usize, usize)> {
    (1usize..=20, 1usize..=4, 1usize..=17, 1usize..=4, 1usize..=12).prop_flat_map(|(s_max, bs, n_aux, abs, e_max)| {
        (Just(s_max), Just(bs), Just(n_aux), Just(abs), Just(e_max), 0..=e_max)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn scheduler_matches_closed_form((s_max, bs, n_aux, abs, e_max, e_mtl) in config(), seed in any::<u64>()) {
        // Main stream sized so that it yields exactly s_max batches.
        let mut main = TaskBatchStream::new(s_max * bs, bs, seed).unwrap();
        let mut aux = TaskBatchStream::new(n_aux * abs, abs, seed ^ 1).unwrap();
        let plan = EpochPlan { e_max, e_mtl };
        let lr = LrSchedule::new(1e-4, 0.1, plan.total_updates(s_max)).unwrap();
        let mut rec = Recorder(Vec::new());
        let log = run_schedule(plan, Task::Dst, &mut main, Some(&mut aux), &lr, &mut rec).unwrap();
        prop_assert_eq!(flatten(&log), interpret(s_max, n_aux, plan, &lr));
        prop_assert_eq!(log.len() as u64, plan.total_updates(s_max));
        // Within one pass every example is used exactly once.
        let mut per_pass = std::collections::BTreeMap::<(Task, u64), Vec<usize>>::new();
        for (r, (_, items)) in log.iter().zip(&rec.0) {
            per_pass.entry((r.task, r.pass)).or_default().extend(items);
        }
        for ((task, _), mut items) in per_pass {
            items.sort_unstable();
            let n = if task == Task::Dst { s_max * bs } else { n_aux * abs };
            let used = items.len();
            items.dedup();
            prop_assert_eq!(items.len(), used);
            prop_assert!(items.iter().all(|&i| i < n));
        }
    }
}

#[test]
fn default_epochs_give_exact_update_counts() {
    for s_max in [1, 7, 40] {
        let mut main = TaskBatchStream::new(s_max * 32, 32, 3).unwrap();
        let mut aux = TaskBatchStream::new(100, 32, 4).unwrap();
        let plan = EpochPlan { e_max: 10, e_mtl: 7 };
        let lr = LrSchedule::new(1e-4, 0.1, plan.total_updates(s_max)).unwrap();
        let log = run_schedule(
            plan,
            Task::Dst,
            &mut main,
            Some(&mut aux),
            &lr,
            &mut Recorder(Vec::new()),
        )
        .unwrap();
        assert_eq!(log.iter().filter(|r| r.task == Task::Dst).count(), 10 * s_max);
        assert_eq!(log.iter().filter(|r| r.task == Task::Aux).count(), 7 * s_max);
        // Every update but the very first runs at a positive rate.
        assert_eq!(log[0].lr, 0.0);
        assert!(log[1..].iter().all(|r| r.lr > 0.0));
    }
}

#[test]
fn streams_cover_every_item_once_per_pass() {
    let mut s = TaskBatchStream::new(70, 32, 9).unwrap();
    for pass in 0..3 {
        let mut seen = Vec::new();
        while let Some(b) = s.next_batch() {
            assert_eq!(b.pass, pass);
            seen.extend(b.items);
        }
        seen.sort_unstable();
        assert_eq!(seen, (0..70).collect::<Vec<_>>());
        s.reset();
    }
}
