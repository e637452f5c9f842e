use outtask::data::synth::{
    synth_classification, synth_dialogs, synth_span_qa, ClassificationSynthSpec, DialogSynthSpec, SpanSynthSpec,
};
use outtask::data::{build_corpus_features, AuxFeatures, AuxTask, InputConfig, TurnFeatures};
use outtask::encoder::EncoderConfig;
use outtask::heads::AuxHead;
use outtask::model::{DstModel, HeadConfig};
use outtask::ontology::Ontology;
use outtask::tokenizer::BpeModel;
use outtask::train::runner::fresh_model;
use outtask::train::{run_baseline, run_itft, run_mtl, RunInputs, Seeds, Task, TrainConfig};

struct Fixture {
    ontology: Ontology,
    tokenizer: BpeModel,
    train: Vec<TurnFeatures>,
    dev: Vec<TurnFeatures>,
}

fn fixture(dialogs: usize) -> Fixture {
    let spec = DialogSynthSpec {
        train: dialogs,
        dev: 6,
        test: 2,
        ..Default::default()
    };
    let splits = synth_dialogs(&spec, 21).unwrap();
    let mut texts: Vec<String> = splits.train.texts().map(String::from).collect();
    let qa = synth_span_qa(&SpanSynthSpec::default(), 21).unwrap();
    texts.extend(AuxTask::Span(qa.train).texts().into_iter().map(String::from));
    let tokenizer = BpeModel::train(&texts, 300).unwrap();
    let input = InputConfig {
        max_len: 64,
        segment_ids: false,
    };
    let (train, _) = build_corpus_features(&splits.train, &tokenizer, input).unwrap();
    let (dev, _) = build_corpus_features(&splits.dev, &tokenizer, input).unwrap();
    Fixture {
        ontology: splits.train.ontology,
        tokenizer,
        train,
        dev,
    }
}

fn tiny(vocab: usize) -> EncoderConfig {
    EncoderConfig {
        layers: 1,
        hidden: 32,
        heads: 2,
        ffn: 64,
        vocab_size: vocab,
        ..Default::default()
    }
}

fn config(e_max: usize, e_mtl: usize) -> TrainConfig {
    TrainConfig {
        e_max,
        e_mtl,
        lr: 1e-3,
        batch_size: 4,
        max_len: 64,
        ..Default::default()
    }
}

fn span_aux(tokenizer: &BpeModel, n: usize) -> Vec<AuxFeatures> {
    let qa = synth_span_qa(&SpanSynthSpec::default(), 21).unwrap();
    let input = InputConfig {
        max_len: 64,
        segment_ids: false,
    };
    let mut f = AuxTask::Span(qa.train).features(tokenizer, input).unwrap();
    f.truncate(n);
    f
}

#[test]
fn separable_classification_is_learned_in_three_epochs() {
    let fx = fixture(8);
    let cls = synth_classification(
        &ClassificationSynthSpec {
            train: 200,
            dev: 100,
            ..Default::default()
        },
        4,
    )
    .unwrap();
    let cls_train = AuxTask::Classification(cls.train);
    let mut texts = cls_train.texts();
    texts.extend(fx.train.iter().map(|f| f.seq.source.as_str()));
    let tokenizer = BpeModel::train(&texts, 300).unwrap();
    let input = InputConfig {
        max_len: 32,
        segment_ids: false,
    };
    let aux_train = cls_train.features(&tokenizer, input).unwrap();
    let aux_dev = AuxTask::Classification(cls.dev).features(&tokenizer, input).unwrap();
    let seeds = Seeds::new(3);
    let model = fresh_model(
        &tiny(tokenizer.vocab_size()),
        HeadConfig::default(),
        &fx.ontology,
        &seeds,
    )
    .unwrap();
    let cfg = TrainConfig {
        phase1_lr: Some(1e-3),
        phase1_epochs: Some(3),
        batch_size: 1,
        ..config(0, 0)
    };
    let inputs = RunInputs {
        dst_train: &fx.train[..0],
        dst_dev: &fx.dev[..0],
        aux_train: &aux_train,
        aux_dev: &aux_dev,
    };
    let out = run_itft(model, AuxHead::Classification { num_classes: 2 }, inputs, &cfg, &seeds).unwrap();
    assert_eq!(out.phase1.history.len(), 3);
    let best = out.phase1.history.iter().map(|h| h.dev_metric).fold(0.0, f64::max);
    assert!(best >= 0.95, "{:?}", out.phase1.history);
    assert!(out.encoder_shift > 0.0);
}

#[test]
fn itft_without_first_phase_is_the_baseline() {
    let fx = fixture(10);
    let aux = span_aux(&fx.tokenizer, 12);
    let seeds = Seeds::new(8);
    let enc = tiny(fx.tokenizer.vocab_size());
    let cfg = TrainConfig {
        phase1_epochs: Some(0),
        ..config(2, 0)
    };
    let inputs = RunInputs {
        dst_train: &fx.train,
        dst_dev: &fx.dev,
        aux_train: &aux,
        aux_dev: &[],
    };
    let model = fresh_model(&enc, cfg.heads, &fx.ontology, &seeds).unwrap();
    let base = run_baseline(model.clone(), inputs, &cfg, &seeds).unwrap();
    let itft = run_itft(model, AuxHead::Span, inputs, &cfg, &seeds).unwrap();
    assert!(itft.phase1.log.is_empty());
    assert_eq!(itft.encoder_shift, 0.0);
    assert_eq!(itft.phase2, base);
}

#[test]
fn mtl_without_interleaving_is_the_baseline() {
    let fx = fixture(10);
    let aux = span_aux(&fx.tokenizer, 12);
    let seeds = Seeds::new(5);
    let enc = tiny(fx.tokenizer.vocab_size());
    let cfg = config(2, 0);
    let inputs = RunInputs {
        dst_train: &fx.train,
        dst_dev: &fx.dev,
        aux_train: &aux,
        aux_dev: &[],
    };
    let model = fresh_model(&enc, cfg.heads, &fx.ontology, &seeds).unwrap();
    let base = run_baseline(model.clone(), inputs, &cfg, &seeds).unwrap();
    let mtl = run_mtl(model, AuxHead::Span, inputs, &cfg, &seeds).unwrap();
    assert_eq!(mtl, base);
}

#[test]
fn mtl_interleaves_and_drops_the_auxiliary_head() {
    let fx = fixture(10);
    let aux = span_aux(&fx.tokenizer, 7);
    let seeds = Seeds::new(5);
    let cfg = config(3, 2);
    let inputs = RunInputs {
        dst_train: &fx.train,
        dst_dev: &fx.dev,
        aux_train: &aux,
        aux_dev: &[],
    };
    let model = fresh_model(&tiny(fx.tokenizer.vocab_size()), cfg.heads, &fx.ontology, &seeds).unwrap();
    let out = run_mtl(model, AuxHead::Span, inputs, &cfg, &seeds).unwrap();
    let s_max = fx.train.len().div_ceil(cfg.batch_size);
    let count = |t: Task| out.log.iter().filter(|r| r.task == t).count();
    assert_eq!(count(Task::Dst), 3 * s_max);
    assert_eq!(count(Task::Aux), 2 * s_max);
    assert_eq!(out.log[0].task, Task::Aux);
    assert_eq!(out.optimizer_steps as usize, out.log.len());
    assert!(out.best.iter().all(|(n, _)| !n.starts_with("aux.")));
    assert!(out.history.iter().take(2).all(|h| h.aux_loss.is_some()));
    assert!(out.history[2].aux_loss.is_none());
}

#[test]
fn training_is_deterministic() {
    let fx = fixture(8);
    let seeds = Seeds::new(2);
    let cfg = TrainConfig {
        slot_value_dropout: 0.2,
        ..config(2, 0)
    };
    let inputs = RunInputs {
        dst_train: &fx.train,
        dst_dev: &fx.dev,
        aux_train: &[],
        aux_dev: &[],
    };
    let run = || {
        let model = fresh_model(&tiny(fx.tokenizer.vocab_size()), cfg.heads, &fx.ontology, &seeds).unwrap();
        run_baseline(model, inputs, &cfg, &seeds).unwrap()
    };
    let a = run();
    assert_eq!(a, run());
    let other = Seeds::new(3);
    let model = fresh_model(&tiny(fx.tokenizer.vocab_size()), cfg.heads, &fx.ontology, &other).unwrap();
    assert_ne!(run_baseline(model, inputs, &cfg, &other).unwrap().log, a.log);
}

#[test]
fn early_stopping_keeps_the_best_epoch() {
    let fx = fixture(10);
    let seeds = Seeds::new(4);
    let cfg = config(3, 0);
    let inputs = RunInputs {
        dst_train: &fx.train,
        dst_dev: &fx.dev,
        aux_train: &[],
        aux_dev: &[],
    };
    let template = fresh_model(&tiny(fx.tokenizer.vocab_size()), cfg.heads, &fx.ontology, &seeds).unwrap();
    let out = run_baseline(template.clone(), inputs, &cfg, &seeds).unwrap();
    let metrics: Vec<f64> = out.history.iter().map(|h| h.dev_metric).collect();
    let best = out.best_epoch.unwrap();
    assert_eq!(Some(best), outtask::train::runner::early_stop_select(&metrics));
    let model = DstModel {
        params: out.best.clone(),
        ..template
    };
    let (preds, _) = outtask::model::predict_dialogs(&model, &fx.dev).unwrap();
    let gold: Vec<_> = fx.dev.iter().map(outtask::eval::GoldTurn::from_features).collect();
    let jga = outtask::eval::joint_goal_accuracy(&preds, &gold, &model.ontology).unwrap();
    assert_eq!(jga, metrics[best - 1]);
}
