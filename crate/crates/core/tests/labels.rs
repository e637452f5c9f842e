use outtask::data::synth::{oov_rate, slot_values, synth_dialogs, DialogSynthSpec, SynthSlot};
use outtask::data::{build_corpus_features, InputConfig};
use outtask::heads::GateClass;
use outtask::ontology::normalize_value;
use outtask::tokenizer::BpeModel;
use proptest::prelude::*;

fn spec(train: usize, test: usize) -> DialogSynthSpec {
    DialogSynthSpec {
        train,
        dev: 20,
        test,
        ..Default::default()
    }
}

#[test]
fn synthetic_dialogs_label_without_flags_and_spans_reproduce_values() {
    let s = synth_dialogs(&spec(200, 40), 17).unwrap();
    let tok = BpeModel::train(s.train.texts(), 400).unwrap();
    let (feats, stats) = build_corpus_features(&s.train, &tok, InputConfig::default()).unwrap();
    assert_eq!(stats.flagged, 0, "{:?}", stats.flagged_at);
    for g in ["none", "span", "inform", "refer", "dontcare", "true", "false"] {
        assert!(
            stats.gates.get(g).copied().unwrap_or(0) > 0,
            "no {g} labels: {:?}",
            stats.gates
        );
    }
    for f in &feats {
        for (slot, l) in s.train.ontology.slots.iter().zip(&f.labels) {
            if l.gate == GateClass::Span {
                let (a, b) = l.span.unwrap();
                let got = normalize_value(&f.seq.detokenize(a, b));
                let want = normalize_value(f.gold_state.get(&slot.name).unwrap());
                assert_eq!(got, want);
            }
        }
    }
}

#[test]
fn feature_building_is_order_independent() {
    let s = synth_dialogs(&spec(30, 10), 2).unwrap();
    let tok = BpeModel::train(s.train.texts(), 300).unwrap();
    let (a, _) = build_corpus_features(&s.train, &tok, InputConfig::default()).unwrap();
    let mut rev = s.train.clone();
    rev.dialogs.reverse();
    let (b, _) = build_corpus_features(&rev, &tok, InputConfig::default()).unwrap();
    for f in &a {
        let g = b
            .iter()
            .find(|g| g.dialog_id == f.dialog_id && g.turn_index == f.turn_index)
            .unwrap();
        assert_eq!(f, g);
    }
    let (again, _) = build_corpus_features(&s.train, &tok, InputConfig::default()).unwrap();
    assert_eq!(a, again);
}

#[test]
fn full_oov_slot_has_no_overlap() {
    let mut sp = spec(150, 60);
    sp.slots.push(SynthSlot::categorical("movie-name").with_oov(1.0));
    let s = synth_dialogs(&sp, 9).unwrap();
    let train = slot_values(&s.train, "movie-name");
    let test = slot_values(&s.test, "movie-name");
    assert!(!test.is_empty());
    assert!(train.is_disjoint(&test));
    assert_eq!(oov_rate(&s.train, &s.test, "movie-name"), Some(1.0));
    assert_eq!(oov_rate(&s.train, &s.test, "restaurant-food"), Some(0.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]
    #[test]
    fn oov_quota_within_two_points(rate in 0.0f64..=1.0, seed in 0u64..1000) {
        let mut sp = spec(80, 150);
        sp.slots[2].oov_rate = rate;
        let s = synth_dialogs(&sp, seed).unwrap();
        let measured = oov_rate(&s.train, &s.test, "restaurant-food").unwrap();
        let draws = outtask::data::synth::value_occurrences(&s.test, "restaurant-food").len() as f64;
        prop_assert!((measured - rate).abs() <= 0.02f64.max(0.5 / draws) + 1e-12, "{} vs {}", measured, rate);
    }
}
