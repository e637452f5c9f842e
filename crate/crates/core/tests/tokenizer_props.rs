use outtask::tokenizer::{BpeModel, CLS, SEP};
use proptest::prelude::*;

fn model() -> BpeModel {
    let corpus = [
        "the hotel is in the north of town",
        "i want a cheap restaurant serving thai food",
        "book the hotel for three nights please",
        "is there free parking at the guesthouse ?",
        "the restaurant should be in the centre",
    ];
    BpeModel::train(corpus, 120).unwrap()
}

fn word() -> impl Strategy<Value = String> {
    proptest::string::string_regex("[a-z]{1,9}").unwrap()
}

fn text() -> impl Strategy<Value = String> {
    prop::collection::vec(word(), 0..12).prop_map(|w| w.join(" "))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn content_tokens_cover_the_text(t in text()) {
        let m = model();
        let seq = m.encode(&t, 512).unwrap();
        let mut rebuilt = String::new();
        let mut last = 0;
        for (i, &(s, e)) in seq.char_spans.iter().enumerate() {
            if seq.part[i].is_some() {
                prop_assert!(s >= last && s < e);
                rebuilt.push_str(&seq.slice_chars(s, e));
                last = e;
            }
        }
        let squash = |x: &str| x.split_whitespace().collect::<String>();
        prop_assert_eq!(squash(&rebuilt), squash(&t));
    }

    #[test]
    fn truncation_keeps_a_prefix(t in text(), max_len in 2usize..20) {
        let m = model();
        let full = m.encode(&t, 512).unwrap();
        let cut = m.encode(&t, max_len).unwrap();
        prop_assert!(cut.len() <= max_len);
        prop_assert_eq!(cut.ids[0], CLS);
        prop_assert_eq!(*cut.ids.last().unwrap(), SEP);
        let body = &cut.ids[1..cut.len() - 1];
        prop_assert_eq!(body, &full.ids[1..1 + body.len()]);
    }

    #[test]
    fn merges_compose_in_order(w in word(), k in 0usize..200) {
        let m = model();
        let k = k.min(m.merges().len());
        let partial = m.tokenize_with_limit(&w, k);
        prop_assert_eq!(m.continue_merges(&partial, k), m.tokenize(&w));
    }

    #[test]
    fn serialization_round_trip_preserves_encoding(t in text()) {
        let m = model();
        let back = BpeModel::from_text(&m.to_text()).unwrap();
        prop_assert_eq!(back.tokenize(&t), m.tokenize(&t));
    }
}
