//! Slot gates with span and refer copy heads.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{argmax, decode_span, GateClass};
use crate::encoder::{linear, EncoderOutput};
use crate::error::{Error, Result};
use crate::ontology::{DialogState, Ontology, SlotDef, SlotKind, DONTCARE, FALSE, TRUE};
use crate::params::{Binding, Initializer, ParamStore};
use crate::tensor::{Graph, Real, Tensor, Var, MASKED_LOGIT};

pub fn gate_head(slot: &str) -> String {
    format!("dst.{slot}.gate")
}

pub fn span_head(slot: &str) -> String {
    format!("dst.{slot}.span")
}

pub fn refer_head(slot: &str) -> String {
    format!("dst.{slot}.refer")
}

/// Fresh head parameters for every slot of `ontology`. Refer heads score
/// "no reference" at index 0 followed by the slot's refer targets.
pub fn init_params<T: Real, R: Rng>(ontology: &Ontology, hidden: usize, rng: R) -> ParamStore<T> {
    let mut init = Initializer::new(rng);
    let mut p = ParamStore::new();
    for slot in &ontology.slots {
        let classes = GateClass::classes(slot.kind).len();
        init.linear(&mut p, &gate_head(&slot.name), hidden, classes);
        if slot.kind == SlotKind::Categorical {
            init.linear(&mut p, &span_head(&slot.name), hidden, 2);
            if !slot.refer_targets.is_empty() {
                init.linear(&mut p, &refer_head(&slot.name), hidden, slot.refer_targets.len() + 1);
            }
        }
    }
    p
}

/// Gold targets for one slot of one turn.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotLabel {
    pub gate: GateClass,
    /// Inclusive token span for `Span` gates.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub span: Option<(usize, usize)>,
    /// Index into the slot's refer targets for `Refer` gates.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refer: Option<usize>,
    /// The value changed but no copy mechanism explains it.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub flagged: bool,
}

impl SlotLabel {
    pub fn none() -> Self {
        SlotLabel {
            gate: GateClass::None,
            span: None,
            refer: None,
            flagged: false,
        }
    }

    pub fn gate(gate: GateClass) -> Self {
        SlotLabel { gate, ..Self::none() }
    }
}

/// Graph handles for one item: per slot, gate logits `[1, classes]`, span
/// logits `[2, len]` and refer logits `[1, targets + 1]`.
#[derive(Debug, Clone)]
pub struct DstHeadOutput {
    pub gates: Vec<Var>,
    pub spans: Vec<Option<Var>>,
    pub refers: Vec<Option<Var>>,
}

fn check_width<T: Real>(g: &Graph<T>, w: Var, head: &str, expected: usize) -> Result<()> {
    if g.shape(w)[1] != expected {
        return Err(Error::shape(
            "dst_forward",
            format!("{head} has {} outputs, ontology needs {expected}", g.shape(w)[1]),
        ));
    }
    Ok(())
}

/// Per-slot heads over one encoded item. `span_valid` marks positions a span
/// may cover; `dropout` applies once to the head inputs.
pub fn dst_forward<T: Real, R: Rng>(
    g: &mut Graph<T>,
    bind: &mut Binding<T>,
    ontology: &Ontology,
    enc: &EncoderOutput,
    span_valid: &[bool],
    dropout: f64,
    rng: &mut R,
) -> Result<DstHeadOutput> {
    let n = g.value(enc.head_tok_reps).rows();
    if span_valid.len() != n {
        return Err(Error::shape(
            "dst_forward",
            format!("span mask {} for {n} tokens", span_valid.len()),
        ));
    }
    let seq = g.dropout(enc.seq_rep, dropout, rng)?;
    let needs_tokens = ontology.slots.iter().any(|s| s.kind == SlotKind::Categorical);
    let (toks, mask) = if needs_tokens {
        if !span_valid.iter().any(|&v| v) {
            return Err(Error::Invalid("span prediction with every position masked".into()));
        }
        let toks = g.dropout(enc.head_tok_reps, dropout, rng)?;
        let mask: Vec<f64> = span_valid.iter().map(|&v| if v { 0.0 } else { MASKED_LOGIT }).collect();
        (Some(toks), Some(g.constant(Tensor::from_f64(&mask))))
    } else {
        (None, None)
    };

    let mut out = DstHeadOutput {
        gates: Vec::with_capacity(ontology.len()),
        spans: Vec::with_capacity(ontology.len()),
        refers: Vec::with_capacity(ontology.len()),
    };
    for slot in &ontology.slots {
        let head = gate_head(&slot.name);
        let w = bind.get(g, &format!("{head}.weight"))?;
        check_width(g, w, &head, GateClass::classes(slot.kind).len())?;
        out.gates.push(linear(g, bind, &head, seq)?);

        let (span, refer) = match (slot.kind, toks, mask) {
            (SlotKind::Categorical, Some(toks), Some(mask)) => {
                let head = span_head(&slot.name);
                let logits = linear(g, bind, &head, toks)?;
                let logits = g.transpose(logits)?;
                let span = g.add_row(logits, mask)?;
                let refer = if slot.refer_targets.is_empty() {
                    None
                } else {
                    let head = refer_head(&slot.name);
                    let w = bind.get(g, &format!("{head}.weight"))?;
                    check_width(g, w, &head, slot.refer_targets.len() + 1)?;
                    Some(linear(g, bind, &head, seq)?)
                };
                (Some(span), refer)
            }
            _ => (None, None),
        };
        out.spans.push(span);
        out.refers.push(refer);
    }
    Ok(out)
}

/// Summed cross entropy of one item: every gate, plus span start/end for
/// gold `Span` slots and the refer head for gold `Refer` slots.
pub fn dst_loss<T: Real>(
    g: &mut Graph<T>,
    ontology: &Ontology,
    out: &DstHeadOutput,
    labels: &[SlotLabel],
) -> Result<Var> {
    if labels.len() != ontology.len() || out.gates.len() != ontology.len() {
        return Err(Error::shape(
            "dst_loss",
            format!(
                "{} labels, {} heads, {} slots",
                labels.len(),
                out.gates.len(),
                ontology.len()
            ),
        ));
    }
    let mut terms = Vec::with_capacity(ontology.len() * 2);
    for (i, (slot, label)) in ontology.slots.iter().zip(labels).enumerate() {
        let target = label
            .gate
            .index(slot.kind)
            .ok_or_else(|| Error::Invalid(format!("gate {:?} is not defined for slot `{}`", label.gate, slot.name)))?;
        terms.push(g.cross_entropy(out.gates[i], &[Some(target)])?);
        if label.gate == GateClass::Span {
            if let (Some(logits), Some((s, e))) = (out.spans[i], label.span) {
                terms.push(g.cross_entropy(logits, &[Some(s), Some(e)])?);
            }
        }
        if label.gate == GateClass::Refer {
            if let (Some(logits), Some(r)) = (out.refers[i], label.refer) {
                terms.push(g.cross_entropy(logits, &[Some(r + 1)])?);
            }
        }
    }
    g.add_all(&terms)
}

/// Plain logit values of one item, detached from the graph.
#[derive(Debug, Clone, PartialEq)]
pub struct DstLogits {
    pub gates: Vec<Vec<f64>>,
    pub spans: Vec<Option<(Vec<f64>, Vec<f64>)>>,
    pub refers: Vec<Option<Vec<f64>>>,
}

impl DstLogits {
    pub fn from_graph<T: Real>(g: &Graph<T>, out: &DstHeadOutput) -> Self {
        DstLogits {
            gates: out.gates.iter().map(|&v| g.value(v).to_f64()).collect(),
            spans: out
                .spans
                .iter()
                .map(|v| {
                    v.map(|v| {
                        let t = g.value(v);
                        let n = t.cols();
                        let d = t.to_f64();
                        (d[..n].to_vec(), d[n..].to_vec())
                    })
                })
                .collect(),
            refers: out.refers.iter().map(|v| v.map(|v| g.value(v).to_f64())).collect(),
        }
    }
}

/// What the model predicted for one slot of one turn.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotPrediction {
    pub gate: GateClass,
    /// Decoded span, reported for every categorical slot.
    pub span: Option<(usize, usize)>,
    /// Chosen refer target, `None` for "no reference".
    pub refer: Option<usize>,
}

fn refer_value(slot: &SlotDef, choice: Option<usize>, state: &DialogState) -> Option<String> {
    let target = slot.refer_targets.get(choice?)?;
    state.get(target).map(str::to_string)
}

/// Apply predicted gates to `prev`, slot by slot in ontology order. `Refer`
/// reads the state as updated so far this turn.
pub fn dst_decode(
    logits: &DstLogits,
    ontology: &Ontology,
    prev: &DialogState,
    informs: &DialogState,
    seq: &crate::tokenizer::TokenizedSequence,
    max_span_len: usize,
) -> Result<(DialogState, Vec<SlotPrediction>)> {
    if logits.gates.len() != ontology.len() {
        return Err(Error::shape(
            "dst_decode",
            format!("{} gate vectors for {} slots", logits.gates.len(), ontology.len()),
        ));
    }
    let mut state = prev.clone();
    let mut preds = Vec::with_capacity(ontology.len());
    for (i, slot) in ontology.slots.iter().enumerate() {
        let classes = GateClass::classes(slot.kind);
        if logits.gates[i].len() != classes.len() {
            return Err(Error::shape(
                "dst_decode",
                format!("slot `{}` has {} gate logits", slot.name, logits.gates[i].len()),
            ));
        }
        let gate = classes[argmax(&logits.gates[i])];
        let span = logits.spans[i].as_ref().map(|(s, e)| decode_span(s, e, max_span_len));
        let refer = logits.refers[i]
            .as_ref()
            .map(|r| argmax(r))
            .and_then(|k| k.checked_sub(1));
        match gate {
            GateClass::None => {}
            GateClass::Dontcare => state.set(&slot.name, DONTCARE),
            GateClass::True => state.set(&slot.name, TRUE),
            GateClass::False => state.set(&slot.name, FALSE),
            GateClass::Span => {
                if let Some((s, e)) = span {
                    let text = seq.detokenize(s, e);
                    if !text.is_empty() {
                        state.set(&slot.name, &text);
                    }
                }
            }
            GateClass::Inform => {
                if let Some(v) = informs.get(&slot.name) {
                    let v = v.to_string();
                    state.set(&slot.name, &v);
                }
            }
            GateClass::Refer => {
                if let Some(v) = refer_value(slot, refer, &state) {
                    state.set(&slot.name, &v);
                }
            }
        }
        preds.push(SlotPrediction { gate, span, refer });
    }
    Ok((state, preds))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::BpeModel;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ontology() -> Ontology {
        Ontology::new(vec![
            SlotDef::categorical("hotel-area"),
            SlotDef::categorical("restaurant-area").with_refer(&["hotel-area"]),
            SlotDef::categorical("restaurant-pricerange"),
            SlotDef::boolean("hotel-parking"),
        ])
        .unwrap()
    }

    fn peaked(len: usize, at: usize) -> Vec<f64> {
        (0..len).map(|i| if i == at { 5.0 } else { 0.0 }).collect()
    }

    fn blank(o: &Ontology, n: usize) -> DstLogits {
        DstLogits {
            gates: o
                .slots
                .iter()
                .map(|s| peaked(GateClass::classes(s.kind).len(), 0))
                .collect(),
            spans: o
                .slots
                .iter()
                .map(|s| (s.kind == SlotKind::Categorical).then(|| (vec![0.0; n], vec![0.0; n])))
                .collect(),
            refers: o
                .slots
                .iter()
                .map(|s| (!s.refer_targets.is_empty()).then(|| peaked(s.refer_targets.len() + 1, 0)))
                .collect(),
        }
    }

    fn turn() -> crate::tokenizer::TokenizedSequence {
        let bpe = BpeModel::train(["i want an expensive restaurant", "the hotel is in london"], 80).unwrap();
        bpe.encode_parts(&["i want an expensive restaurant", "the hotel is in london"], 64, false)
            .unwrap()
    }

    #[test]
    fn all_none_keeps_previous_state() {
        let o = ontology();
        let seq = turn();
        let mut prev = DialogState::new();
        prev.set("hotel-area", "north");
        let (state, _) = dst_decode(&blank(&o, seq.len()), &o, &prev, &DialogState::new(), &seq, 20).unwrap();
        assert_eq!(state, prev);
    }

    #[test]
    fn span_gate_extracts_value() {
        let o = ontology();
        let seq = turn();
        let (s, e) = seq.char_span_to_token_span(10, 19).unwrap().unwrap();
        assert_eq!(seq.detokenize(s, e), "expensive");
        let mut l = blank(&o, seq.len());
        l.gates[2] = peaked(5, 2);
        l.spans[2] = Some((peaked(seq.len(), s), peaked(seq.len(), e)));
        let (state, preds) = dst_decode(&l, &o, &DialogState::new(), &DialogState::new(), &seq, 20).unwrap();
        assert_eq!(state.get("restaurant-pricerange"), Some("expensive"));
        assert_eq!(preds[2].span, Some((s, e)));
    }

    #[test]
    fn refer_copies_updated_value_and_inform_falls_back() {
        let o = ontology();
        let seq = turn();
        let mut l = blank(&o, seq.len());
        let (s, e) = seq.char_span_to_token_span(47, 53).unwrap().unwrap();
        l.gates[0] = peaked(5, 2);
        l.spans[0] = Some((peaked(seq.len(), s), peaked(seq.len(), e)));
        l.gates[1] = peaked(5, 4);
        l.refers[1] = Some(peaked(2, 1));
        l.gates[2] = peaked(5, 3);
        l.gates[3] = peaked(4, 2);
        let mut prev = DialogState::new();
        prev.set("restaurant-pricerange", "cheap");
        let (state, _) = dst_decode(&l, &o, &prev, &DialogState::new(), &seq, 20).unwrap();
        assert_eq!(state.get("hotel-area"), Some("london"));
        assert_eq!(state.get("restaurant-area"), Some("london"));
        assert_eq!(state.get("restaurant-pricerange"), Some("cheap"));
        assert_eq!(state.get("hotel-parking"), Some("true"));

        let mut informs = DialogState::new();
        informs.set("restaurant-pricerange", "moderate");
        let (state, _) = dst_decode(&l, &o, &prev, &informs, &seq, 20).unwrap();
        assert_eq!(state.get("restaurant-pricerange"), Some("moderate"));
    }

    #[test]
    fn forward_shapes_and_missing_head() {
        let o = ontology();
        let cfg = crate::encoder::EncoderConfig {
            layers: 1,
            hidden: 8,
            heads: 2,
            ffn: 16,
            vocab_size: 20,
            ..Default::default()
        };
        let mut store: ParamStore<f64> = cfg.init_params(ChaCha8Rng::seed_from_u64(0)).unwrap();
        store.extend(init_params(&o, 8, ChaCha8Rng::seed_from_u64(1)));
        let ids = [0u32, 7, 8, 9, 1];
        let segs = [0u32; 5];
        let mask = [true; 5];
        let valid = [false, true, true, true, false];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = Graph::new();
        let mut bind = Binding::new(&store);
        let input = crate::encoder::EncoderInput {
            ids: &ids,
            segments: &segs,
            mask: &mask,
        };
        let enc = cfg.forward(&mut g, &mut bind, input, false, &mut rng).unwrap();
        let out = dst_forward(&mut g, &mut bind, &o, &enc, &valid, 0.0, &mut rng).unwrap();
        assert_eq!(out.gates.len(), 4);
        assert_eq!(g.shape(out.gates[3]), &[1, 4]);
        assert!(out.spans[3].is_none() && out.refers[3].is_none());
        assert_eq!(g.shape(out.spans[0].unwrap()), &[2, 5]);
        assert_eq!(g.shape(out.refers[1].unwrap()), &[1, 2]);

        store.remove_prefix("dst.hotel-parking.");
        let mut g = Graph::new();
        let mut bind = Binding::new(&store);
        let enc = cfg.forward(&mut g, &mut bind, input, false, &mut rng).unwrap();
        let err = dst_forward(&mut g, &mut bind, &o, &enc, &valid, 0.0, &mut rng).unwrap_err();
        assert!(err.to_string().contains("hotel-parking"));
    }
}
