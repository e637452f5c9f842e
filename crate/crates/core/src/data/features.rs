//! Turn-level model inputs and gold gate/span/refer labels.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::dialog::{DialogCorpus, DialogTurn};
use crate::error::Result;
use crate::heads::{GateClass, SlotLabel};
use crate::ontology::{normalize_value, DialogState, Ontology, SlotKind, DONTCARE, FALSE, TRUE};
use crate::tokenizer::{BpeModel, TokenizedSequence};

/// Default DST input length in tokens.
pub const DST_MAX_LEN: usize = 180;

/// Sequence length and segment-id toggle for encoded inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputConfig {
    pub max_len: usize,
    pub segment_ids: bool,
}

impl Default for InputConfig {
    fn default() -> Self {
        InputConfig {
            max_len: DST_MAX_LEN,
            segment_ids: false,
        }
    }
}

// Input part indices.
pub const USER_PART: usize = 0;
pub const SYSTEM_PART: usize = 1;
pub const HISTORY_PART: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct TurnFeatures {
    pub dialog_id: String,
    pub turn_index: usize,
    pub seq: TokenizedSequence,
    /// Positions a span head may select.
    pub span_valid: Vec<bool>,
    /// One label per ontology slot, in ontology order.
    pub labels: Vec<SlotLabel>,
    pub informs: DialogState,
    pub gold_state: DialogState,
}

/// Gate distribution and unexplained value changes of a feature set.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelStats {
    pub turns: usize,
    pub gates: BTreeMap<String, usize>,
    pub flagged: usize,
    /// `(dialog, turn, slot)` of each flagged label.
    pub flagged_at: Vec<(String, usize, String)>,
}

fn fold(c: char) -> char {
    c.to_lowercase().next().unwrap_or(c)
}

/// Char ranges of case-insensitive occurrences of `value` in `text` that
/// start and end on word boundaries.
pub fn find_value(text: &str, value: &str) -> Vec<(usize, usize)> {
    let hay: Vec<char> = text.chars().map(fold).collect();
    let needle: Vec<char> = normalize_value(value).chars().map(fold).collect();
    let mut hits = Vec::new();
    if needle.is_empty() || needle.len() > hay.len() {
        return hits;
    }
    for start in 0..=hay.len() - needle.len() {
        let end = start + needle.len();
        if hay[start..end] != needle[..] {
            continue;
        }
        let left_ok = start == 0 || !hay[start - 1].is_alphanumeric() || !needle[0].is_alphanumeric();
        let right_ok = end == hay.len() || !hay[end].is_alphanumeric() || !needle[needle.len() - 1].is_alphanumeric();
        if left_ok && right_ok {
            hits.push((start, end));
        }
    }
    hits
}

/// First occurrence of `value` in input part `part` that survived truncation,
/// as an inclusive token span.
fn locate(seq: &TokenizedSequence, parts: &[&str], part: usize, value: &str) -> Option<(usize, usize)> {
    let offset = seq.part_offsets[part];
    find_value(parts[part], value)
        .into_iter()
        .find_map(|(s, e)| seq.char_span_to_token_span(offset + s, offset + e).ok().flatten())
}

/// Newest-first history text from the turns before the current one.
pub fn history_text(prior: &[DialogTurn]) -> String {
    let mut out: Vec<&str> = Vec::new();
    for t in prior.iter().rev() {
        for u in [t.user_utterance.as_str(), t.system_utterance.as_str()] {
            if !u.trim().is_empty() {
                out.push(u.trim());
            }
        }
    }
    out.join(" ")
}

fn label_slot(
    ontology: &Ontology,
    slot: usize,
    turn: &DialogTurn,
    prev: &DialogState,
    seq: &TokenizedSequence,
    parts: &[&str],
) -> SlotLabel {
    let def = &ontology.slots[slot];
    let gold = turn.gold_state.get(&def.name);
    if turn.gold_state.slot_matches(prev, &def.name) {
        return SlotLabel::none();
    }
    let flagged = SlotLabel {
        flagged: true,
        ..SlotLabel::none()
    };
    let Some(value) = gold else {
        return flagged;
    };
    let norm = normalize_value(value);
    if norm == DONTCARE {
        return SlotLabel::gate(GateClass::Dontcare);
    }
    if def.kind == SlotKind::Boolean {
        return match norm.as_str() {
            TRUE => SlotLabel::gate(GateClass::True),
            FALSE => SlotLabel::gate(GateClass::False),
            _ => flagged,
        };
    }
    for part in [USER_PART, SYSTEM_PART] {
        if let Some(span) = locate(seq, parts, part, value) {
            return SlotLabel {
                span: Some(span),
                ..SlotLabel::gate(GateClass::Span)
            };
        }
    }
    if turn
        .system_informs
        .get(&def.name)
        .is_some_and(|v| normalize_value(v) == norm)
    {
        return SlotLabel::gate(GateClass::Inform);
    }
    if let Some(r) = def
        .refer_targets
        .iter()
        .position(|t| turn.gold_state.get(t).is_some_and(|v| normalize_value(v) == norm))
    {
        return SlotLabel {
            refer: Some(r),
            ..SlotLabel::gate(GateClass::Refer)
        };
    }
    if let Some(span) = locate(seq, parts, HISTORY_PART, value) {
        return SlotLabel {
            span: Some(span),
            ..SlotLabel::gate(GateClass::Span)
        };
    }
    flagged
}

/// Encode one turn as `CLS user SEP system SEP history SEP` and derive a
/// label for every slot from the change against `prev`, the previous gold
/// state.
pub fn build_turn_features(
    dialog_id: &str,
    turn: &DialogTurn,
    prev: &DialogState,
    history: &str,
    tokenizer: &BpeModel,
    ontology: &Ontology,
    input: InputConfig,
) -> Result<TurnFeatures> {
    let parts = [turn.user_utterance.as_str(), turn.system_utterance.as_str(), history];
    let seq = tokenizer.encode_parts(&parts, input.max_len, input.segment_ids)?;
    let labels = (0..ontology.len())
        .map(|i| label_slot(ontology, i, turn, prev, &seq, &parts))
        .collect();
    Ok(TurnFeatures {
        dialog_id: dialog_id.to_string(),
        turn_index: turn.turn_index,
        span_valid: seq.content_mask(),
        seq,
        labels,
        informs: turn.system_informs.clone(),
        gold_state: turn.gold_state.clone(),
    })
}

/// Features for every turn of a corpus, dialogs and turns in file order.
pub fn build_corpus_features(
    corpus: &DialogCorpus,
    tokenizer: &BpeModel,
    input: InputConfig,
) -> Result<(Vec<TurnFeatures>, LabelStats)> {
    let mut out = Vec::with_capacity(corpus.num_turns());
    let mut stats = LabelStats::default();
    for d in &corpus.dialogs {
        let mut prev = DialogState::new();
        for (i, turn) in d.turns.iter().enumerate() {
            let history = history_text(&d.turns[..i]);
            let f = build_turn_features(&d.id, turn, &prev, &history, tokenizer, &corpus.ontology, input)?;
            stats.turns += 1;
            for (slot, l) in corpus.ontology.slots.iter().zip(&f.labels) {
                *stats.gates.entry(l.gate.as_str().to_string()).or_default() += 1;
                if l.flagged {
                    stats.flagged += 1;
                    stats.flagged_at.push((d.id.clone(), i, slot.name.clone()));
                }
            }
            prev = turn.gold_state.clone();
            out.push(f);
        }
    }
    Ok((out, stats))
}
