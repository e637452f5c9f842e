use outtask::data::synth::{synth_dialogs, synth_span_qa, DialogSynthSpec, SpanSynthSpec};
use outtask::data::{build_corpus_features, DialogCorpus, InputConfig};
use outtask::data::{AuxTask, SpanTask};
use outtask::encoder::EncoderConfig;
use outtask::heads::AuxHead;
use outtask::model::{init_dst_params, model_grad_check, DstModel};
use outtask::tensor::{grad_check, Graph, Tensor, Var};
use outtask::tokenizer::BpeModel;
use outtask::Result;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn check(shapes: &[&[usize]], f: impl FnMut(&mut Graph<f64>, &[Var]) -> Result<Var>) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut params: Vec<Tensor<f64>> = shapes.iter().map(|s| random(s, &mut rng)).collect();
    let report = grad_check(&mut params, f, 1e-6, 200, 3).unwrap();
    assert!(report.max_rel_error < 1e-6, "{report:?}");
}

// Weighted sum so that every output coordinate gets a distinct upstream gradient.
fn reduce(g: &mut Graph<f64>, x: Var) -> Var {
    let shape = g.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let w = g.constant(Tensor::new(shape, (0..n).map(|i| 0.3 + (i as f64 * 0.37).sin()).collect()).unwrap());
    let y = g.mul(x, w).unwrap();
    g.sum(y)
}

#[test]
fn matmul_transpose_add_row() {
    check(&[&[3, 4], &[4, 5], &[5]], |g, v| {
        let m = g.matmul(v[0], v[1])?;
        let m = g.add_row(m, v[2])?;
        let t = g.transpose(m)?;
        Ok(reduce(g, t))
    });
}

#[test]
fn pointwise_nonlinearities() {
    check(&[&[4, 6], &[4, 6]], |g, v| {
        let a = g.gelu(v[0]);
        let b = g.tanh(v[1]);
        let c = g.mul(a, b)?;
        let d = g.add(c, v[0])?;
        let s = g.scale(d, 1.7);
        Ok(reduce(g, s))
    });
}

#[test]
fn softmax_and_layer_norm() {
    check(&[&[3, 7], &[7], &[7]], |g, v| {
        let n = g.layer_norm(v[0], v[1], v[2])?;
        let s = g.softmax(n);
        Ok(reduce(g, s))
    });
}

#[test]
fn embedding_gather_concat_slice() {
    check(&[&[6, 4], &[3, 2]], |g, v| {
        let e = g.embedding(v[0], &[1, 4, 1, 0])?;
        let r = g.gather_rows(e, &[3, 0, 2])?;
        let c = g.concat_cols(&[r, v[1]])?;
        let s = g.slice_cols(c, 1, 4)?;
        Ok(reduce(g, s))
    });
}

#[test]
fn cross_entropy_with_ignored_rows() {
    check(&[&[4, 5]], |g, v| {
        g.cross_entropy(v[0], &[Some(2), None, Some(0), Some(4)])
    });
}

#[test]
fn fixed_dropout_mask() {
    check(&[&[2, 5]], |g, v| {
        let d = g.dropout_with_mask(v[0], vec![2.0, 0.0, 2.0, 2.0, 0.0, 0.0, 2.0, 2.0, 2.0, 0.0])?;
        Ok(reduce(g, d))
    });
}

proptest! {
    #[test]
    fn softmax_ignores_row_shifts(xs in prop::collection::vec(-20.0f64..20.0, 1..12), c in -50.0f64..50.0) {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_f64(&xs));
        let shifted: Vec<f64> = xs.iter().map(|x| x + c).collect();
        let b = g.constant(Tensor::from_f64(&shifted));
        let (pa, pb) = (g.softmax(a), g.softmax(b));
        for (x, y) in g.value(pa).data().iter().zip(g.value(pb).data()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_is_linear_in_the_loss(xs in prop::collection::vec(-2.0f64..2.0, 6), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let grad = |ca: f64, cb: f64| -> Vec<f64> {
            let mut g = Graph::<f64>::new();
            let x = g.param(Tensor::new(vec![2, 3], xs.clone()).unwrap());
            let s = g.softmax(x);
            let f = reduce(&mut g, s);
            let t = g.tanh(x);
            let h = g.sum(t);
            let (fa, hb) = (g.scale(f, ca), g.scale(h, cb));
            let l = g.add(fa, hb).unwrap();
            g.backward(l).unwrap().take(x).unwrap().into_data()
        };
        let (ga, gb, gab) = (grad(1.0, 0.0), grad(0.0, 1.0), grad(a, b));
        for i in 0..6 {
            prop_assert!((gab[i] - (a * ga[i] + b * gb[i])).abs() < 1e-12);
        }
    }
}

#[test]
fn whole_model_gradients_match_central_differences() {
    let splits = synth_dialogs(
        &DialogSynthSpec {
            train: 6,
            dev: 1,
            test: 1,
            ..Default::default()
        },
        5,
    )
    .unwrap();
    let qa = synth_span_qa(
        &SpanSynthSpec {
            train: 2,
            dev: 1,
            ..Default::default()
        },
        5,
    )
    .unwrap();
    let tok = BpeModel::train(splits.train.texts().chain(AuxTask::Span(qa.train.clone()).texts()), 60).unwrap();
    let cfg = EncoderConfig {
        layers: 2,
        hidden: 16,
        heads: 2,
        ffn: 32,
        vocab_size: tok.vocab_size(),
        ..Default::default()
    };
    let ontology = splits.train.ontology.clone();
    let mut params = init_dst_params::<f64>(&cfg, &ontology, 1, 2).unwrap();
    params.extend(
        AuxHead::Span
            .init_params(cfg.hidden, ChaCha8Rng::seed_from_u64(3))
            .unwrap(),
    );
    params.extend(
        AuxHead::Classification { num_classes: 3 }
            .init_params(cfg.hidden, ChaCha8Rng::seed_from_u64(4))
            .unwrap(),
    );
    let model = DstModel {
        encoder: cfg,
        heads: Default::default(),
        ontology: ontology.clone(),
        params,
    };
    let one = DialogCorpus {
        ontology: ontology.clone(),
        dialogs: splits.train.dialogs[..1].to_vec(),
    };
    let (dst, _) = build_corpus_features(
        &one,
        &tok,
        InputConfig {
            max_len: 64,
            ..Default::default()
        },
    )
    .unwrap();
    let span = AuxTask::Span(SpanTask {
        examples: qa.train.examples[..2].to_vec(),
    });
    let cls = AuxTask::Classification(
        outtask::data::ClassificationTask::new(
            3,
            vec![outtask::data::ClassificationExample {
                text_a: "the hotel is north".into(),
                text_b: Some("the hotel".into()),
                label: 2,
            }],
        )
        .unwrap(),
    );
    let mut aux = span
        .features(
            &tok,
            InputConfig {
                max_len: 64,
                ..Default::default()
            },
        )
        .unwrap();
    aux.extend(
        cls.features(
            &tok,
            InputConfig {
                max_len: 32,
                ..Default::default()
            },
        )
        .unwrap(),
    );
    let report = model_grad_check(&model, &dst, &aux, 1e-6, 300, 9).unwrap();
    assert!(report.max_rel_error < 1e-5, "{report:?}");
}
