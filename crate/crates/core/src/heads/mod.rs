//! Task heads on top of the encoder.
//!
//! * sequence classification over the pooled representation,
//! * start/end span prediction over token representations,
//! * the dialog-state stack in [`dst`]: one slot gate, one span head and one
//!   refer head per domain-slot pair.

pub mod dst;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use dst::{dst_decode, DstHeadOutput, DstLogits, SlotLabel, SlotPrediction};

use crate::encoder::linear;
use crate::error::{Error, Result};
use crate::ontology::SlotKind;
use crate::params::{Binding, Initializer, ParamStore};
use crate::tensor::{Graph, Real, Tensor, Var, MASKED_LOGIT};

/// Default cap on decoded span length, in tokens.
pub const MAX_SPAN_LEN: usize = 20;

pub const CLS_HEAD: &str = "aux.cls";
pub const SPAN_HEAD: &str = "aux.span";

/// Per-slot gate decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateClass {
    None,
    Dontcare,
    /// Copy a span from the dialog context.
    Span,
    /// Copy the value the system offered this turn.
    Inform,
    /// Copy the value of another slot.
    Refer,
    True,
    False,
}

const CATEGORICAL_GATES: [GateClass; 5] = [
    GateClass::None,
    GateClass::Dontcare,
    GateClass::Span,
    GateClass::Inform,
    GateClass::Refer,
];
const BOOLEAN_GATES: [GateClass; 4] = [GateClass::None, GateClass::Dontcare, GateClass::True, GateClass::False];

impl GateClass {
    pub fn classes(kind: SlotKind) -> &'static [GateClass] {
        match kind {
            SlotKind::Categorical => &CATEGORICAL_GATES,
            SlotKind::Boolean => &BOOLEAN_GATES,
        }
    }

    pub fn index(self, kind: SlotKind) -> Option<usize> {
        Self::classes(kind).iter().position(|&c| c == self)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            GateClass::None => "none",
            GateClass::Dontcare => "dontcare",
            GateClass::Span => "span",
            GateClass::Inform => "inform",
            GateClass::Refer => "refer",
            GateClass::True => "true",
            GateClass::False => "false",
        }
    }
}

/// Shape of the auxiliary-task head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum AuxHead {
    Classification { num_classes: usize },
    Span,
}

impl AuxHead {
    pub fn init_params<T: Real, R: Rng>(&self, hidden: usize, rng: R) -> Result<ParamStore<T>> {
        let mut init = Initializer::new(rng);
        let mut p = ParamStore::new();
        match *self {
            AuxHead::Classification { num_classes } => {
                if num_classes < 2 {
                    return Err(Error::Config(format!(
                        "classification head needs >= 2 classes, got {num_classes}"
                    )));
                }
                init.linear(&mut p, CLS_HEAD, hidden, num_classes);
            }
            AuxHead::Span => init.linear(&mut p, SPAN_HEAD, hidden, 2),
        }
        Ok(p)
    }
}

/// Class logits `[1, C]` from a pooled representation.
pub fn classify_sequence<T: Real, R: Rng>(
    g: &mut Graph<T>,
    bind: &mut Binding<T>,
    head: &str,
    seq_rep: Var,
    dropout: f64,
    rng: &mut R,
) -> Result<Var> {
    let w = bind.get(g, &format!("{head}.weight"))?;
    if g.shape(w)[0] != g.value(seq_rep).cols() {
        return Err(Error::shape(
            "classify_sequence",
            format!("representation {:?} vs head {:?}", g.shape(seq_rep), g.shape(w)),
        ));
    }
    let x = g.dropout(seq_rep, dropout, rng)?;
    linear(g, bind, head, x)
}

/// Start/end logits `[2, len]` (row 0 start, row 1 end); positions where
/// `valid` is false get [`MASKED_LOGIT`].
pub fn predict_span<T: Real, R: Rng>(
    g: &mut Graph<T>,
    bind: &mut Binding<T>,
    head: &str,
    tok_reps: Var,
    valid: &[bool],
    dropout: f64,
    rng: &mut R,
) -> Result<Var> {
    let n = g.value(tok_reps).rows();
    if valid.len() != n {
        return Err(Error::shape(
            "predict_span",
            format!("mask of {} for {:?}", valid.len(), g.shape(tok_reps)),
        ));
    }
    if !valid.iter().any(|&v| v) {
        return Err(Error::Invalid("span prediction with every position masked".into()));
    }
    let x = g.dropout(tok_reps, dropout, rng)?;
    let logits = linear(g, bind, head, x)?;
    let logits = g.transpose(logits)?;
    let mask: Vec<f64> = valid.iter().map(|&v| if v { 0.0 } else { MASKED_LOGIT }).collect();
    let mask = g.constant(Tensor::from_f64(&mask));
    g.add_row(logits, mask)
}

/// Best `(start, end)` with `start <= end < start + max_span_len` by summed
/// logit; ties go to the smaller start, then the smaller end.
pub fn decode_span(start: &[f64], end: &[f64], max_span_len: usize) -> (usize, usize) {
    let n = start.len().min(end.len());
    let width = max_span_len.max(1);
    let mut best = (0, 0);
    let mut best_score = f64::NEG_INFINITY;
    for (s, &ls) in start[..n].iter().enumerate() {
        for (e, &le) in end.iter().enumerate().take(n.min(s + width)).skip(s) {
            let score = ls + le;
            if score > best_score {
                best_score = score;
                best = (s, e);
            }
        }
    }
    best
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn brute_force(start: &[f64], end: &[f64], max_len: usize) -> (usize, usize) {
        let mut pairs = Vec::new();
        for (s, &ls) in start.iter().enumerate() {
            for (e, &le) in end.iter().enumerate() {
                if s <= e && e - s < max_len.max(1) {
                    pairs.push((ls + le, s, e));
                }
            }
        }
        let top = pairs.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
        let (_, s, e) = pairs
            .into_iter()
            .filter(|p| p.0 == top)
            .min_by_key(|p| (p.1, p.2))
            .unwrap();
        (s, e)
    }

    #[test]
    fn zero_head_gives_uniform_logits() {
        let mut store = ParamStore::<f64>::new();
        store.insert("aux.cls.weight", Tensor::zeros(&[4, 3]), true);
        store.insert("aux.cls.bias", Tensor::zeros(&[3]), false);
        let mut g = Graph::new();
        let mut bind = Binding::new(&store);
        let x = g.constant(Tensor::new(vec![1, 4], vec![0.3, -1.0, 2.0, 0.5]).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let logits = classify_sequence(&mut g, &mut bind, CLS_HEAD, x, 0.0, &mut rng).unwrap();
        assert_eq!(g.value(logits).data(), &[0.0, 0.0, 0.0]);
        let p = g.softmax(logits);
        assert!(g.value(p).data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn three_class_head() {
        let head = AuxHead::Classification { num_classes: 3 };
        let p: ParamStore<f32> = head.init_params(8, ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(p.get("aux.cls.weight").unwrap().tensor.shape(), &[8, 3]);
        assert!(AuxHead::Classification { num_classes: 1 }
            .init_params::<f32, _>(8, ChaCha8Rng::seed_from_u64(0))
            .is_err());
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let p: ParamStore<f64> = AuxHead::Classification { num_classes: 2 }
            .init_params(8, ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        let mut g = Graph::new();
        let mut bind = Binding::new(&p);
        let x = g.constant(Tensor::zeros(&[1, 5]));
        let r = classify_sequence(&mut g, &mut bind, CLS_HEAD, x, 0.0, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(r.is_err());
    }

    #[test]
    fn single_valid_position_wins() {
        let p: ParamStore<f64> = AuxHead::Span.init_params(4, ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut g = Graph::new();
        let mut bind = Binding::new(&p);
        let reps = g.constant(Tensor::new(vec![5, 4], (0..20).map(|i| i as f64 * 0.1).collect()).unwrap());
        let valid = [false, false, false, true, false];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let logits = predict_span(&mut g, &mut bind, SPAN_HEAD, reps, &valid, 0.0, &mut rng).unwrap();
        let v = g.value(logits).to_f64();
        assert_eq!(decode_span(&v[..5], &v[5..], MAX_SPAN_LEN), (3, 3));
        let none = [false; 5];
        assert!(predict_span(&mut g, &mut bind, SPAN_HEAD, reps, &none, 0.0, &mut rng).is_err());
    }

    #[test]
    fn decode_rules() {
        assert_eq!(decode_span(&[0.0; 6], &[0.0; 6], 20), (0, 0));
        let mut s = vec![0.0; 8];
        let mut e = vec![0.0; 8];
        s[3] = 5.0;
        e[5] = 5.0;
        assert_eq!(decode_span(&s, &e, 20), (3, 5));
        let mut s = vec![0.0; 8];
        let mut e = vec![0.0; 8];
        s[2] = 5.0;
        e[1] = 5.0;
        let (a, b) = decode_span(&s, &e, 20);
        assert!(a <= b);
        let r = decode_span(&[1.0, 3.0, 2.0], &[0.5, 0.1, 4.0], 1);
        assert_eq!(r.0, r.1);
    }

    #[test]
    fn decode_matches_brute_force_on_random_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let n = rng.gen_range(1..=12);
            let s: Vec<f64> = (0..n).map(|_| rng.gen_range(-3..=3) as f64).collect();
            let e: Vec<f64> = (0..n).map(|_| rng.gen_range(-3..=3) as f64).collect();
            let m = rng.gen_range(1..=n + 1);
            assert_eq!(decode_span(&s, &e, m), brute_force(&s, &e, m));
        }
    }
}
