//! Real updates on model parameters, epoch evaluation and early stopping.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::schedule::{run_schedule, EpochPlan, LrSchedule, Task, UpdateRecord, Updater};
use super::{Adam, TrainConfig};
use crate::data::{AuxFeatures, Batch, TaskBatchStream, TurnFeatures};
use crate::error::{Error, Result};
use crate::eval::metrics::{joint_goal_accuracy, GoldTurn};
use crate::heads::{AuxHead, GateClass};
use crate::model::{aux_accuracy, aux_item_loss, batch_gradients, dst_item_loss, predict_dialogs, DstModel};
use crate::ontology::Ontology;
use crate::params::ParamStore;
use crate::seed;
use crate::tensor::Real;
use crate::tokenizer::UNK;

/// Per-purpose seeds derived from one master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub master: u64,
}

impl Seeds {
    pub fn new(master: u64) -> Self {
        Seeds { master }
    }

    pub fn encoder_init(&self) -> u64 {
        seed::derive(self.master, "init-encoder")
    }

    pub fn dst_heads_init(&self) -> u64 {
        seed::derive(self.master, "init-dst-heads")
    }

    pub fn aux_head_init(&self) -> u64 {
        seed::derive(self.master, "init-aux-head")
    }

    /// `(main shuffle, aux shuffle, dropout, slot value dropout)` of a phase.
    fn phase(&self, phase: &str) -> [u64; 4] {
        ["shuffle-main", "shuffle-aux", "dropout", "slot-value-dropout"]
            .map(|p| seed::derive(self.master, &format!("{phase}/{p}")))
    }
}

/// Metrics after one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean main-task update loss.
    pub train_loss: f64,
    /// Mean auxiliary update loss, when there were auxiliary updates.
    pub aux_loss: Option<f64>,
    pub dev_loss: f64,
    /// Dev JGA for DST, dev accuracy for an auxiliary task.
    pub dev_metric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome<T> {
    /// Parameters of the selected epoch (the last one without a dev set).
    pub best: ParamStore<T>,
    pub best_epoch: Option<usize>,
    pub history: Vec<EpochRecord>,
    pub log: Vec<UpdateRecord>,
    pub optimizer_steps: u64,
}

/// Index (1-based epoch) of the highest dev metric; ties go to the earliest.
pub fn early_stop_select(metrics: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &m) in metrics.iter().enumerate() {
        if best.is_none_or(|(_, b)| m > b) {
            best = Some((i, m));
        }
    }
    best.map(|(i, _)| i + 1)
}

/// Token ids of `f` with each token inside a gold span replaced by `UNK`
/// with probability `rate`.
pub fn value_dropout_ids<R: Rng>(f: &TurnFeatures, rate: f64, rng: &mut R) -> Vec<u32> {
    let mut ids = f.seq.ids.clone();
    if rate <= 0.0 {
        return ids;
    }
    for l in &f.labels {
        if let (GateClass::Span, Some((s, e))) = (l.gate, l.span) {
            for id in &mut ids[s..=e] {
                if rng.gen_bool(rate.min(1.0)) {
                    *id = UNK;
                }
            }
        }
    }
    ids
}

pub fn slot_value_dropout(feats: &[TurnFeatures], rate: f64, seed: u64) -> Vec<TurnFeatures> {
    let mut rng = seed::rng(seed);
    feats
        .iter()
        .map(|f| {
            let mut out = f.clone();
            out.seq.ids = value_dropout_ids(f, rate, &mut rng);
            out
        })
        .collect()
}

/// Data a run trains and evaluates on.
#[derive(Debug, Clone, Copy)]
pub struct RunInputs<'a> {
    pub dst_train: &'a [TurnFeatures],
    pub dst_dev: &'a [TurnFeatures],
    pub aux_train: &'a [AuxFeatures],
    pub aux_dev: &'a [AuxFeatures],
}

struct RealUpdater<'a, T: Real> {
    model: DstModel<T>,
    adam: Adam<T>,
    inputs: RunInputs<'a>,
    main: Task,
    svd_rate: f64,
    dropout_rng: ChaCha8Rng,
    svd_rng: ChaCha8Rng,
    gold_dev: Vec<GoldTurn>,
    epoch_losses: Vec<f64>,
    epoch_aux: Vec<f64>,
    history: Vec<EpochRecord>,
    best: Option<(usize, f64, ParamStore<T>)>,
}

impl<T: Real> Updater for RealUpdater<'_, T> {
    fn update(&mut self, task: Task, batch: &Batch, lr: f64) -> Result<f64> {
        let model = &self.model;
        let rng = &mut self.dropout_rng;
        let (loss, grads) = match task {
            Task::Dst => {
                let feats = self.inputs.dst_train;
                let svd_rng = &mut self.svd_rng;
                let rate = self.svd_rate;
                batch_gradients(&model.params, batch.items.len(), |g, bind, i| {
                    let f = &feats[batch.items[i]];
                    let ids = (rate > 0.0).then(|| value_dropout_ids(f, rate, svd_rng));
                    let (loss, _) = dst_item_loss(
                        g,
                        bind,
                        &model.encoder,
                        &model.heads,
                        &model.ontology,
                        f,
                        ids.as_deref(),
                        true,
                        rng,
                    )?;
                    Ok(loss)
                })?
            }
            Task::Aux => {
                let feats = self.inputs.aux_train;
                batch_gradients(&model.params, batch.items.len(), |g, bind, i| {
                    let (loss, _) =
                        aux_item_loss(g, bind, &model.encoder, &model.heads, &feats[batch.items[i]], true, rng)?;
                    Ok(loss)
                })?
            }
        };
        self.adam.step(&mut self.model.params, &grads, lr)?;
        if task == self.main {
            self.epoch_losses.push(loss);
        } else {
            self.epoch_aux.push(loss);
        }
        Ok(loss)
    }

    fn epoch_end(&mut self, epoch: usize) -> Result<()> {
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
        let (dev_loss, dev_metric) = match self.main {
            Task::Dst if !self.inputs.dst_dev.is_empty() => {
                let (preds, loss) = predict_dialogs(&self.model, self.inputs.dst_dev)?;
                (loss, joint_goal_accuracy(&preds, &self.gold_dev, &self.model.ontology)?)
            }
            Task::Aux if !self.inputs.aux_dev.is_empty() => {
                let (acc, loss) = aux_accuracy(
                    &self.model.encoder,
                    &self.model.heads,
                    &self.model.params,
                    self.inputs.aux_dev,
                )?;
                (loss, acc)
            }
            _ => (f64::NAN, f64::NAN),
        };
        let record = EpochRecord {
            epoch,
            train_loss: mean(&self.epoch_losses),
            aux_loss: (!self.epoch_aux.is_empty()).then(|| mean(&self.epoch_aux)),
            dev_loss,
            dev_metric,
        };
        log::info!(
            "epoch {epoch}: train loss {:.4}, dev loss {:.4}, dev metric {:.4}",
            record.train_loss,
            record.dev_loss,
            record.dev_metric
        );
        self.epoch_losses.clear();
        self.epoch_aux.clear();
        if !dev_metric.is_nan() && self.best.as_ref().is_none_or(|(_, b, _)| dev_metric > *b) {
            self.best = Some((epoch, dev_metric, self.model.params.clone()));
        }
        self.history.push(record);
        Ok(())
    }
}

/// Train `model` with `main` as the target task for `plan`. Auxiliary
/// updates interleave for the first `plan.e_mtl` epochs.
#[allow(clippy::too_many_arguments)]
pub fn train_task<T: Real>(
    model: DstModel<T>,
    inputs: RunInputs<'_>,
    main: Task,
    plan: EpochPlan,
    lr_init: f64,
    cfg: &TrainConfig,
    seeds: &Seeds,
    phase: &str,
) -> Result<(DstModel<T>, TrainOutcome<T>)> {
    cfg.validate()?;
    let main_len = match main {
        Task::Dst => inputs.dst_train.len(),
        Task::Aux => inputs.aux_train.len(),
    };
    if plan.e_max == 0 {
        return Ok((
            model.clone(),
            TrainOutcome {
                best: model.params,
                best_epoch: None,
                history: Vec::new(),
                log: Vec::new(),
                optimizer_steps: 0,
            },
        ));
    }
    let [main_seed, aux_seed, dropout_seed, svd_seed] = seeds.phase(phase);
    let mut main_stream = TaskBatchStream::new(main_len, cfg.batch_size, main_seed)?;
    let mut aux_stream = if plan.e_mtl > 0 {
        Some(TaskBatchStream::new(inputs.aux_train.len(), cfg.batch_size, aux_seed)?)
    } else {
        None
    };
    let lr = LrSchedule::new(
        lr_init,
        cfg.warmup_fraction,
        plan.total_updates(main_stream.num_batches()),
    )?;
    let gold_dev = inputs.dst_dev.iter().map(GoldTurn::from_features).collect();
    let mut updater = RealUpdater {
        model,
        adam: Adam::new(cfg.weight_decay),
        inputs,
        main,
        svd_rate: if main == Task::Dst { cfg.slot_value_dropout } else { 0.0 },
        dropout_rng: seed::rng(dropout_seed),
        svd_rng: seed::rng(svd_seed),
        gold_dev,
        epoch_losses: Vec::new(),
        epoch_aux: Vec::new(),
        history: Vec::new(),
        best: None,
    };
    let log = run_schedule(plan, main, &mut main_stream, aux_stream.as_mut(), &lr, &mut updater)?;
    let metrics: Vec<f64> = updater.history.iter().map(|r| r.dev_metric).collect();
    let (best_epoch, best) = match updater.best.take() {
        Some((epoch, _, params)) => {
            debug_assert_eq!(early_stop_select(&metrics), Some(epoch));
            (Some(epoch), params)
        }
        None => (None, updater.model.params.clone()),
    };
    let outcome = TrainOutcome {
        best,
        best_epoch,
        history: updater.history,
        log,
        optimizer_steps: updater.adam.steps(),
    };
    Ok((updater.model, outcome))
}

/// Fresh model for `seeds`: encoder plus DST heads.
pub fn fresh_model(
    encoder: &crate::encoder::EncoderConfig,
    heads: crate::model::HeadConfig,
    ontology: &Ontology,
    seeds: &Seeds,
) -> Result<DstModel<f32>> {
    Ok(DstModel {
        encoder: encoder.clone(),
        heads,
        ontology: ontology.clone(),
        params: crate::model::init_dst_params(encoder, ontology, seeds.encoder_init(), seeds.dst_heads_init())?,
    })
}

/// DST fine-tuning alone.
pub fn run_baseline(
    model: DstModel<f32>,
    inputs: RunInputs<'_>,
    cfg: &TrainConfig,
    seeds: &Seeds,
) -> Result<TrainOutcome<f32>> {
    let plan = EpochPlan {
        e_max: cfg.e_max,
        e_mtl: 0,
    };
    train_task(model, inputs, Task::Dst, plan, cfg.lr, cfg, seeds, "dst").map(|(_, o)| o)
}

/// Step-interleaved training with one shared optimizer. The auxiliary head
/// is mounted next to the DST heads for the whole run.
pub fn run_mtl(
    mut model: DstModel<f32>,
    aux_head: AuxHead,
    inputs: RunInputs<'_>,
    cfg: &TrainConfig,
    seeds: &Seeds,
) -> Result<TrainOutcome<f32>> {
    if inputs.aux_train.is_empty() && cfg.e_mtl > 0 {
        return Err(Error::Invalid("interleaved training needs auxiliary examples".into()));
    }
    model
        .params
        .extend(aux_head.init_params(model.encoder.hidden, seed::rng(seeds.aux_head_init()))?);
    let plan = EpochPlan {
        e_max: cfg.e_max,
        e_mtl: cfg.e_mtl,
    };
    let (_, mut out) = train_task(model, inputs, Task::Dst, plan, cfg.lr, cfg, seeds, "dst")?;
    out.best.remove_prefix("aux.");
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ItftOutcome {
    pub phase1: TrainOutcome<f32>,
    pub phase2: TrainOutcome<f32>,
    /// Encoder distance moved during phase 1.
    pub encoder_shift: f64,
}

/// Auxiliary fine-tuning, then DST fine-tuning of the same encoder with the
/// auxiliary head dropped, fresh DST heads and a fresh optimizer.
pub fn run_itft(
    mut model: DstModel<f32>,
    aux_head: AuxHead,
    inputs: RunInputs<'_>,
    cfg: &TrainConfig,
    seeds: &Seeds,
) -> Result<ItftOutcome> {
    let (lr1, epochs1, _) = cfg.phase1(aux_head);
    let initial = model.params.clone();
    model
        .params
        .extend(aux_head.init_params(model.encoder.hidden, seed::rng(seeds.aux_head_init()))?);
    let plan = EpochPlan {
        e_max: epochs1,
        e_mtl: 0,
    };
    let (mut tuned, phase1) = train_task(model, inputs, Task::Aux, plan, lr1, cfg, seeds, "phase1")?;
    tuned.params.remove_prefix("aux.");
    tuned.params.remove_prefix("dst.");
    tuned.params.extend(crate::heads::dst::init_params(
        &tuned.ontology,
        tuned.encoder.hidden,
        seed::rng(seeds.dst_heads_init()),
    ));
    let encoder_shift = tuned.params.distance(&initial, "encoder.");
    let phase2 = run_baseline(tuned, inputs, cfg, seeds)?;
    Ok(ItftOutcome {
        phase1,
        phase2,
        encoder_shift,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn early_stopping_rule() {
        assert_eq!(early_stop_select(&[0.1, 0.3, 0.2]), Some(2));
        assert_eq!(early_stop_select(&[0.5, 0.5, 0.5]), Some(1));
        assert_eq!(early_stop_select(&[0.1, 0.2, 0.3]), Some(3));
        assert_eq!(early_stop_select(&[]), None);
    }
}
