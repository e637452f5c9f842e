//! Command pipelines and the run directory layout.
//!
//! A training run directory holds `spec.toml`, `run.json`, `tokenizer.txt`,
//! `report.json` and one `seed-<n>/` per seed with `updates.csv`,
//! `epochs.csv`, `metrics.json` and `checkpoint.bin`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use outtask::data::synth::{synth_classification, synth_dialogs, synth_span_qa};
use outtask::data::{
    build_corpus_features, AuxFeatures, AuxTask, ClassificationTask, DialogCorpus, InputConfig, LabelStats, SpanTask,
    TurnFeatures,
};
use outtask::eval::report::{
    build_table1, build_table3, loss_reduction, loss_reduction_csv, AuxKind, Method, MethodRuns,
};
use outtask::eval::{joint_goal_accuracy, slot_metrics, GoldTurn, RunReport, SlotMetrics};
use outtask::heads::AuxHead;
use outtask::model::{predict_dialogs, DstModel, TurnPrediction};
use outtask::ontology::Ontology;
use outtask::tokenizer::BpeModel;
use outtask::train::runner::fresh_model;
use outtask::train::{run_baseline, run_itft, run_mtl, EpochRecord, RunInputs, Seeds, TrainOutcome, UpdateRecord};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{config_hash, sha256_hex, Checkpoint};
use crate::config::{AuxSpec, AuxType, ExperimentSpec, Mode};

/// Self-description of a training run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub version: String,
    pub mode: Mode,
    pub dataset: String,
    pub seeds: Vec<u64>,
    pub aux: Option<AuxInfo>,
    pub tokenizer_hash: String,
    pub config_hash: String,
    pub label_stats: LabelStats,
    /// Split the report was computed on.
    pub eval_split: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuxInfo {
    pub name: String,
    pub kind: AuxType,
    pub train_examples: usize,
}

/// Per-seed results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub best_epoch: Option<usize>,
    pub optimizer_steps: u64,
    pub dev_jga: f64,
    pub eval_jga: f64,
    pub eval: SlotMetrics,
    pub encoder_shift: Option<f64>,
}

struct Data {
    ontology: Ontology,
    tokenizer: BpeModel,
    tokenizer_hash: String,
    train: Vec<TurnFeatures>,
    dev: Vec<TurnFeatures>,
    eval: Vec<TurnFeatures>,
    eval_split: &'static str,
    stats: LabelStats,
}

fn load_corpus(path: &Path, ontology: Option<&Ontology>) -> Result<DialogCorpus> {
    let c = DialogCorpus::load(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(o) = ontology {
        if &c.ontology != o {
            bail!("{} uses a different ontology than the training set", path.display());
        }
    }
    Ok(c)
}

fn input_config(spec: &ExperimentSpec, max_len: usize) -> InputConfig {
    InputConfig {
        max_len,
        segment_ids: spec.encoder.segment_embeddings,
    }
}

fn tokenizer_for(spec: &ExperimentSpec, train: Option<&DialogCorpus>) -> Result<BpeModel> {
    match (&spec.tokenizer.path, train) {
        (Some(p), _) => BpeModel::load(p).with_context(|| format!("loading tokenizer {}", p.display())),
        (None, Some(c)) => Ok(BpeModel::train(c.texts(), spec.tokenizer.vocab_size)?),
        (None, None) => bail!("no tokenizer given and no training corpus to learn one from"),
    }
}

fn load_data(spec: &ExperimentSpec) -> Result<Data> {
    let train_path = spec
        .data
        .train
        .as_ref()
        .ok_or_else(|| anyhow!("data.train is required"))?;
    let train = load_corpus(train_path, None)?;
    let ontology = train.ontology.clone();
    let dev_path = spec.data.dev.as_ref().ok_or_else(|| anyhow!("data.dev is required"))?;
    let dev = load_corpus(dev_path, Some(&ontology))?;
    let tokenizer = tokenizer_for(spec, Some(&train))?;
    let input = input_config(spec, spec.train.max_len);
    let (train_f, stats) = build_corpus_features(&train, &tokenizer, input)?;
    if stats.flagged > 0 {
        log::warn!(
            "{} slot changes in the training set have no copy explanation",
            stats.flagged
        );
    }
    let (dev_f, _) = build_corpus_features(&dev, &tokenizer, input)?;
    let (eval, eval_split) = match &spec.data.test {
        Some(p) => (
            build_corpus_features(&load_corpus(p, Some(&ontology))?, &tokenizer, input)?.0,
            "test",
        ),
        None => (dev_f.clone(), "dev"),
    };
    Ok(Data {
        ontology,
        tokenizer_hash: sha256_hex(tokenizer.to_text().as_bytes()),
        tokenizer,
        train: train_f,
        dev: dev_f,
        eval,
        eval_split,
        stats,
    })
}

fn load_aux(a: &AuxSpec) -> Result<(AuxTask, Option<AuxTask>)> {
    let load = |p: &Path| -> Result<AuxTask> {
        Ok(match a.kind {
            AuxType::Classification => AuxTask::Classification(ClassificationTask::load(p, a.num_classes)?),
            AuxType::Span => AuxTask::Span(SpanTask::load(p)?),
        })
    };
    let train = load(&a.train).with_context(|| format!("loading auxiliary task `{}`", a.name))?;
    let dev = a.dev.as_deref().map(load).transpose()?;
    if let (AuxTask::Classification(t), Some(AuxTask::Classification(d))) = (&train, &dev) {
        if t.num_classes != d.num_classes {
            bail!(
                "auxiliary dev set of `{}` has {} classes, train {}",
                a.name,
                d.num_classes,
                t.num_classes
            );
        }
    }
    Ok((train, dev))
}

pub fn evaluate(
    model: &DstModel<f32>,
    feats: &[TurnFeatures],
    high_oov: &[String],
) -> Result<(f64, SlotMetrics, Vec<TurnPrediction>)> {
    let (preds, _) = predict_dialogs(model, feats)?;
    let gold: Vec<GoldTurn> = feats.iter().map(GoldTurn::from_features).collect();
    let jga = joint_goal_accuracy(&preds, &gold, &model.ontology)?;
    let slots = slot_metrics(&preds, &gold, &model.ontology, high_oov)?;
    Ok((jga, slots, preds))
}

fn csv_string(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

fn updates_csv(phases: &[(&str, &[UpdateRecord])]) -> Result<String> {
    let rows = phases.iter().flat_map(|(phase, log)| {
        log.iter().map(move |r| {
            vec![
                phase.to_string(),
                r.task.as_str().into(),
                r.epoch.to_string(),
                r.step.to_string(),
                r.pass.to_string(),
                r.batch.to_string(),
                r.loss.to_string(),
                r.lr.to_string(),
            ]
        })
    });
    csv_string(&["phase", "task", "epoch", "step", "pass", "batch", "loss", "lr"], rows)
}

fn epochs_csv(phases: &[(&str, &[EpochRecord])]) -> Result<String> {
    let rows = phases.iter().flat_map(|(phase, hist)| {
        hist.iter().map(move |h| {
            vec![
                phase.to_string(),
                h.epoch.to_string(),
                h.train_loss.to_string(),
                h.aux_loss.map_or(String::new(), |x| x.to_string()),
                h.dev_loss.to_string(),
                h.dev_metric.to_string(),
            ]
        })
    });
    csv_string(
        &["phase", "epoch", "train_loss", "aux_loss", "dev_loss", "dev_metric"],
        rows,
    )
}

/// Parsed `updates.csv` row.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct UpdateRow {
    pub phase: String,
    pub task: String,
    pub epoch: usize,
    pub step: usize,
    pub pass: u64,
    pub batch: usize,
    pub loss: f64,
    pub lr: f64,
}

pub fn read_updates(path: &Path) -> Result<Vec<UpdateRow>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct EpochRow {
    pub phase: String,
    pub epoch: usize,
    pub train_loss: f64,
    pub aux_loss: Option<f64>,
    pub dev_loss: f64,
    pub dev_metric: f64,
}

pub fn read_epochs(path: &Path) -> Result<Vec<EpochRow>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write(path, s)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Train every seed of a baseline, ITFT or MTL experiment.
pub fn run_training(spec: &ExperimentSpec) -> Result<PathBuf> {
    let out = spec.out_dir();
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let data = load_data(spec)?;
    let mut encoder = spec.encoder.clone();
    if encoder.vocab_size != data.tokenizer.vocab_size() {
        log::info!(
            "encoder vocab size set to the tokenizer's {}",
            data.tokenizer.vocab_size()
        );
        encoder.vocab_size = data.tokenizer.vocab_size();
    }
    let cfg = &spec.train;
    if spec.mode == Mode::Baseline && !spec.aux.is_empty() {
        log::info!("baseline run ignores the configured auxiliary task");
    }
    let aux = match spec.aux.first() {
        Some(a) if spec.mode != Mode::Baseline => {
            let (train, dev) = load_aux(a)?;
            let head = train.head();
            let max_len = match spec.mode {
                Mode::Itft => cfg.phase1(head).2,
                _ => cfg.aux_max_len.unwrap_or(train.default_max_len()),
            };
            let input = input_config(spec, max_len);
            let train_f = train.features(&data.tokenizer, input)?;
            let dev_f = dev
                .map(|d| d.features(&data.tokenizer, input))
                .transpose()?
                .unwrap_or_default();
            Some((a.clone(), head, train_f, dev_f))
        }
        _ => None,
    };
    let hash = config_hash(&encoder, &cfg.heads, &data.ontology, cfg);
    let info = RunInfo {
        version: env!("CARGO_PKG_VERSION").into(),
        mode: spec.mode,
        dataset: spec.data.name.clone(),
        seeds: spec.seeds.clone(),
        aux: aux.as_ref().map(|(a, _, t, _)| AuxInfo {
            name: a.name.clone(),
            kind: a.kind,
            train_examples: t.len(),
        }),
        tokenizer_hash: data.tokenizer_hash.clone(),
        config_hash: hash,
        label_stats: data.stats.clone(),
        eval_split: data.eval_split.into(),
    };
    write(&out.join("spec.toml"), spec.to_toml()?)?;
    write_json(&out.join("run.json"), &info)?;
    data.tokenizer.save(out.join("tokenizer.txt"))?;

    let empty: Vec<AuxFeatures> = Vec::new();
    let (aux_train, aux_dev) = aux.as_ref().map_or((&empty, &empty), |(_, _, t, d)| (t, d));
    let inputs = RunInputs {
        dst_train: &data.train,
        dst_dev: &data.dev,
        aux_train,
        aux_dev,
    };
    let mut per_seed = Vec::new();
    for &seed in &spec.seeds {
        log::info!("{} seed {seed}", spec.mode.as_str());
        let seeds = Seeds::new(seed);
        let model = fresh_model(&encoder, cfg.heads, &data.ontology, &seeds)?;
        let template = model.clone();
        let dir = out.join(format!("seed-{seed}"));
        fs::create_dir_all(&dir)?;
        let (outcome, phase1, shift): (TrainOutcome<f32>, Option<TrainOutcome<f32>>, Option<f64>) =
            match (spec.mode, &aux) {
                (Mode::Baseline, _) => (run_baseline(model, inputs, cfg, &seeds)?, None, None),
                (Mode::Mtl, Some((_, head, _, _))) => (run_mtl(model, *head, inputs, cfg, &seeds)?, None, None),
                (Mode::Itft, Some((_, head, _, _))) => {
                    let o = run_itft(model, *head, inputs, cfg, &seeds)?;
                    (o.phase2, Some(o.phase1), Some(o.encoder_shift))
                }
                _ => bail!("{} needs an auxiliary task", spec.mode.as_str()),
            };
        let main_phase = if spec.mode == Mode::Itft { "phase2" } else { "main" };
        let mut log_phases = Vec::new();
        let mut hist_phases = Vec::new();
        if let Some(p1) = &phase1 {
            log_phases.push(("phase1", &p1.log[..]));
            hist_phases.push(("phase1", &p1.history[..]));
        }
        log_phases.push((main_phase, &outcome.log[..]));
        hist_phases.push((main_phase, &outcome.history[..]));
        write(&dir.join("updates.csv"), updates_csv(&log_phases)?)?;
        write(&dir.join("epochs.csv"), epochs_csv(&hist_phases)?)?;

        let best = DstModel {
            params: outcome.best.clone(),
            ..template
        };
        let (dev_jga, _, _) = evaluate(&best, &data.dev, &spec.data.high_oov_slots)?;
        let (eval_jga, eval, _) = evaluate(&best, &data.eval, &spec.data.high_oov_slots)?;
        let mut ck = Checkpoint::from_model(&best, cfg, &data.tokenizer_hash, seed);
        ck.meta.epoch = outcome.best_epoch;
        ck.meta.dev_jga = Some(dev_jga);
        ck.save(&dir.join("checkpoint.bin"))?;
        let m = SeedMetrics {
            seed,
            best_epoch: outcome.best_epoch,
            optimizer_steps: outcome.optimizer_steps + phase1.as_ref().map_or(0, |p| p.optimizer_steps),
            dev_jga,
            eval_jga,
            eval,
            encoder_shift: shift,
        };
        write_json(&dir.join("metrics.json"), &m)?;
        per_seed.push(m);
    }
    let name = match &info.aux {
        Some(a) => format!("{}-{}", spec.mode.as_str(), a.name),
        None => spec.mode.as_str().to_string(),
    };
    let report = RunReport::new(
        &name,
        &spec.data.name,
        spec.seeds.clone(),
        per_seed.iter().map(|m| m.eval_jga).collect(),
        per_seed.into_iter().map(|m| m.eval).collect(),
    )?;
    write_json(&out.join("report.json"), &report)?;
    Ok(out)
}

/// Re-evaluate a checkpoint on the test (or dev) corpus.
pub fn run_eval(spec: &ExperimentSpec) -> Result<PathBuf> {
    let out = spec.out_dir();
    fs::create_dir_all(&out)?;
    let ck_path = spec
        .checkpoint
        .as_ref()
        .ok_or_else(|| anyhow!("eval needs a checkpoint"))?;
    let (ck, _) = Checkpoint::load(ck_path, None)?;
    let tok_path = match &spec.tokenizer.path {
        Some(p) => p.clone(),
        None => ck_path
            .parent()
            .and_then(Path::parent)
            .map(|d| d.join("tokenizer.txt"))
            .ok_or_else(|| anyhow!("cannot locate the tokenizer of {}", ck_path.display()))?,
    };
    let tokenizer = BpeModel::load(&tok_path).with_context(|| format!("loading {}", tok_path.display()))?;
    if sha256_hex(tokenizer.to_text().as_bytes()) != ck.meta.tokenizer_hash {
        bail!(
            "{} is not the tokenizer {} was trained with",
            tok_path.display(),
            ck_path.display()
        );
    }
    let path = spec
        .data
        .test
        .as_ref()
        .or(spec.data.dev.as_ref())
        .ok_or_else(|| anyhow!("eval needs data"))?;
    let corpus = load_corpus(path, None)?;
    let mut encoder = spec.encoder.clone();
    encoder.vocab_size = tokenizer.vocab_size();
    let expected = config_hash(&encoder, &spec.train.heads, &corpus.ontology, &spec.train);
    if expected != ck.meta.config_hash {
        log::warn!(
            "{} was trained under a different configuration than the current one",
            ck_path.display()
        );
    }
    let input = InputConfig {
        max_len: ck.meta.train.max_len,
        segment_ids: ck.meta.encoder.segment_embeddings,
    };
    let model = ck.into_model(&corpus.ontology)?;
    let (feats, _) = build_corpus_features(&corpus, &tokenizer, input)?;
    let (jga, slots, preds) = evaluate(&model, &feats, &spec.data.high_oov_slots)?;
    write_json(
        &out.join("eval_metrics.json"),
        &serde_json::json!({ "jga": jga, "slots": slots }),
    )?;
    write_json(&out.join("predictions.json"), &preds)?;
    Ok(out)
}

/// Write synthetic dialog, span QA and classification corpora.
pub fn run_synth(spec: &ExperimentSpec) -> Result<PathBuf> {
    let out = spec.out_dir();
    fs::create_dir_all(&out)?;
    let s = &spec.synth;
    let dialogs = synth_dialogs(&s.dialogs, s.seed)?;
    dialogs.train.save(out.join("dst_train.json"))?;
    dialogs.dev.save(out.join("dst_dev.json"))?;
    dialogs.test.save(out.join("dst_test.json"))?;
    dialogs.train.ontology.save(out.join("ontology.json"))?;
    let qa = synth_span_qa(&s.span_qa, s.seed)?;
    qa.train.save(out.join("qa_train.json"))?;
    qa.dev.save(out.join("qa_dev.json"))?;
    let cls = synth_classification(&s.classification, s.seed)?;
    cls.train.save(out.join("cls_train.tsv"))?;
    cls.dev.save(out.join("cls_dev.tsv"))?;
    Ok(out)
}

/// Learn a tokenizer from the DST training texts and any auxiliary texts.
pub fn run_tokenizer_train(spec: &ExperimentSpec) -> Result<PathBuf> {
    let out = spec.out_dir();
    fs::create_dir_all(&out)?;
    let mut texts: Vec<String> = Vec::new();
    if let Some(p) = &spec.data.train {
        texts.extend(load_corpus(p, None)?.texts().map(String::from));
    }
    for a in &spec.aux {
        texts.extend(load_aux(a)?.0.texts().into_iter().map(String::from));
    }
    let tok = BpeModel::train(&texts, spec.tokenizer.vocab_size)?;
    let path = out.join("tokenizer.txt");
    tok.save(&path)?;
    Ok(path)
}

struct LoadedRun {
    info: RunInfo,
    report: RunReport,
    dev_losses: Vec<Vec<f64>>,
}

fn load_run(dir: &Path) -> Result<LoadedRun> {
    let info: RunInfo = read_json(&dir.join("run.json"))?;
    let report: RunReport = read_json(&dir.join("report.json"))?;
    let mut dev_losses = Vec::new();
    for seed in &info.seeds {
        let rows = read_epochs(&dir.join(format!("seed-{seed}")).join("epochs.csv"))?;
        dev_losses.push(
            rows.iter()
                .filter(|r| r.phase != "phase1")
                .map(|r| r.dev_loss)
                .collect(),
        );
    }
    Ok(LoadedRun {
        info,
        report,
        dev_losses,
    })
}

/// Comparison tables for finished runs against a baseline run.
pub fn run_report(spec: &ExperimentSpec) -> Result<PathBuf> {
    let out = spec.out_dir();
    let base_dir = spec
        .baseline_run
        .as_ref()
        .ok_or_else(|| anyhow!("report needs a baseline run"))?;
    let base = load_run(base_dir).with_context(|| format!("baseline run {}", base_dir.display()))?;
    if base.info.mode != Mode::Baseline {
        bail!(
            "{} is a {} run, not a baseline",
            base_dir.display(),
            base.info.mode.as_str()
        );
    }
    let runs = spec
        .runs
        .iter()
        .map(|d| load_run(d).with_context(|| format!("run {}", d.display())))
        .collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(&out)?;
    let baselines: BTreeMap<String, Vec<f64>> = [(base.info.dataset.clone(), base.report.per_seed_jga.clone())].into();
    let mut method_runs = Vec::new();
    let mut comparisons = Vec::new();
    let mut table3 = vec![(AuxKind::Baseline, metrics_of(&base.report))];
    let mut groups: BTreeMap<String, Vec<Vec<f64>>> = BTreeMap::new();
    for r in &runs {
        let method = match r.info.mode {
            Mode::Itft => Method::Itft,
            Mode::Mtl => Method::Mtl,
            m => bail!("cannot compare a {} run", m.as_str()),
        };
        let aux = r
            .info
            .aux
            .as_ref()
            .ok_or_else(|| anyhow!("{} run without an auxiliary task", r.info.mode.as_str()))?;
        method_runs.push(MethodRuns {
            aux: aux.name.clone(),
            method,
            dataset: r.info.dataset.clone(),
            jga: r.report.per_seed_jga.clone(),
        });
        let mut rep = r.report.clone();
        rep.compare(&base.report, spec.significance)?;
        comparisons.push(rep);
        table3.push((
            match aux.kind {
                AuxType::Classification => AuxKind::Classification,
                AuxType::Span => AuxKind::Span,
            },
            metrics_of(&r.report),
        ));
        let size = if aux.train_examples >= spec.large_aux {
            "large"
        } else {
            "small"
        };
        groups
            .entry(format!("{}-{size}", r.info.mode.as_str()))
            .or_default()
            .extend(r.dev_losses.iter().cloned());
    }
    let t1 = build_table1(&baselines, &method_runs, spec.significance)?;
    write(&out.join("table1.txt"), t1.render())?;
    write(&out.join("table1.csv"), t1.to_csv()?)?;
    let t3 = build_table3(&table3);
    write(&out.join("table3.txt"), t3.render())?;
    write(&out.join("table3.csv"), t3.to_csv()?)?;
    write_json(&out.join("comparisons.json"), &comparisons)?;
    let groups: Vec<(String, Vec<Vec<f64>>)> = groups.into_iter().collect();
    if !groups.is_empty() {
        let (rows, truncated) = loss_reduction(&base.dev_losses, &groups)?;
        if truncated {
            log::warn!("loss histories had unequal lengths and were truncated");
        }
        write(&out.join("loss_reduction.csv"), loss_reduction_csv(&rows)?)?;
    }
    Ok(out)
}

fn metrics_of(r: &RunReport) -> SlotMetrics {
    SlotMetrics {
        overall: r.overall,
        per_slot: r.per_slot.clone(),
        high_oov: r.high_oov,
    }
}

/// Dispatch on the configured mode.
pub fn run(spec: &ExperimentSpec) -> Result<PathBuf> {
    spec.validate()?;
    match spec.mode {
        Mode::Baseline | Mode::Itft | Mode::Mtl => run_training(spec),
        Mode::Eval => run_eval(spec),
        Mode::SynthData => run_synth(spec),
        Mode::TokenizerTrain => run_tokenizer_train(spec),
        Mode::Report => run_report(spec),
    }
}

pub fn aux_head_of(kind: AuxType, num_classes: usize) -> AuxHead {
    match kind {
        AuxType::Classification => AuxHead::Classification { num_classes },
        AuxType::Span => AuxHead::Span,
    }
}
