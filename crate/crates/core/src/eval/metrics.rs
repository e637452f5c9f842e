//! Turn- and slot-level accuracy against gold features.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::data::TurnFeatures;
use crate::error::{Error, Result};
use crate::heads::GateClass;
use crate::model::TurnPrediction;
use crate::ontology::{DialogState, Ontology};

/// Reference state and labels of one turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldTurn {
    pub dialog_id: String,
    pub turn_index: usize,
    pub state: DialogState,
    pub gates: Vec<GateClass>,
    pub spans: Vec<Option<(usize, usize)>>,
}

impl GoldTurn {
    pub fn from_features(f: &TurnFeatures) -> Self {
        GoldTurn {
            dialog_id: f.dialog_id.clone(),
            turn_index: f.turn_index,
            state: f.gold_state.clone(),
            gates: f.labels.iter().map(|l| l.gate).collect(),
            spans: f.labels.iter().map(|l| l.span).collect(),
        }
    }
}

/// Pair every gold turn with its unique prediction.
pub fn align<'a>(preds: &'a [TurnPrediction], gold: &'a [GoldTurn]) -> Result<Vec<(&'a TurnPrediction, &'a GoldTurn)>> {
    let mut by_key = BTreeMap::new();
    for p in preds {
        if by_key.insert((p.dialog_id.as_str(), p.turn_index), p).is_some() {
            return Err(Error::Invalid(format!(
                "dialog {} turn {} predicted twice",
                p.dialog_id, p.turn_index
            )));
        }
    }
    let mut out = Vec::with_capacity(gold.len());
    let mut seen = BTreeSet::new();
    for g in gold {
        let key = (g.dialog_id.as_str(), g.turn_index);
        let p = by_key.get(&key).ok_or_else(|| {
            Error::Invalid(format!(
                "no prediction for dialog {} turn {}",
                g.dialog_id, g.turn_index
            ))
        })?;
        seen.insert(key);
        out.push((*p, g));
    }
    if let Some(p) = preds
        .iter()
        .find(|p| !seen.contains(&(p.dialog_id.as_str(), p.turn_index)))
    {
        return Err(Error::Invalid(format!(
            "prediction for dialog {} turn {} has no gold turn",
            p.dialog_id, p.turn_index
        )));
    }
    Ok(out)
}

/// Fraction of turns whose whole predicted state matches gold.
pub fn joint_goal_accuracy(preds: &[TurnPrediction], gold: &[GoldTurn], ontology: &Ontology) -> Result<f64> {
    if gold.is_empty() {
        return Err(Error::Invalid("no turns to score".into()));
    }
    let pairs = align(preds, gold)?;
    let correct = pairs
        .iter()
        .filter(|(p, g)| p.state.matches(&g.state, ontology))
        .count();
    Ok(correct as f64 / gold.len() as f64)
}

/// Value, gate and span accuracy with their denominators.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SlotScores {
    pub sa: f64,
    pub sga: f64,
    /// `None` when no gold span occurs.
    pub spa: Option<f64>,
    pub instances: usize,
    pub span_instances: usize,
}

#[derive(Debug, Clone, Copy, Default)]
struct Counts {
    n: usize,
    value: usize,
    gate: usize,
    spans: usize,
    span_hits: usize,
}

impl Counts {
    fn add(&mut self, o: &Counts) {
        self.n += o.n;
        self.value += o.value;
        self.gate += o.gate;
        self.spans += o.spans;
        self.span_hits += o.span_hits;
    }

    fn scores(&self) -> SlotScores {
        let rate = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        SlotScores {
            sa: rate(self.value, self.n),
            sga: rate(self.gate, self.n),
            spa: (self.spans > 0).then(|| rate(self.span_hits, self.spans)),
            instances: self.n,
            span_instances: self.spans,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotMetrics {
    pub overall: SlotScores,
    pub per_slot: BTreeMap<String, SlotScores>,
    /// Scores pooled over the declared high-OOV slots.
    pub high_oov: Option<SlotScores>,
}

/// SA, SGA and SPA overall, per slot and over `high_oov` slots.
pub fn slot_metrics(
    preds: &[TurnPrediction],
    gold: &[GoldTurn],
    ontology: &Ontology,
    high_oov: &[String],
) -> Result<SlotMetrics> {
    if let Some(s) = high_oov.iter().find(|s| ontology.slot(s).is_none()) {
        return Err(Error::Invalid(format!("high-OOV slot `{s}` not in the ontology")));
    }
    let pairs = align(preds, gold)?;
    let mut per = vec![Counts::default(); ontology.len()];
    for (p, g) in pairs {
        let n = ontology.len();
        if p.gates.len() != n || g.gates.len() != n || p.spans.len() != n || g.spans.len() != n {
            return Err(Error::Invalid(format!(
                "dialog {} turn {}: per-slot outputs do not cover {n} slots",
                g.dialog_id, g.turn_index
            )));
        }
        for (i, slot) in ontology.slots.iter().enumerate() {
            let c = &mut per[i];
            c.n += 1;
            c.value += usize::from(p.state.slot_matches(&g.state, &slot.name));
            c.gate += usize::from(p.gates[i] == g.gates[i]);
            if g.gates[i] == GateClass::Span {
                c.spans += 1;
                c.span_hits +=
                    usize::from(p.gates[i] == GateClass::Span && p.spans[i].is_some() && p.spans[i] == g.spans[i]);
            }
        }
    }
    let mut overall = Counts::default();
    let mut subset = Counts::default();
    let mut per_slot = BTreeMap::new();
    for (slot, c) in ontology.slots.iter().zip(&per) {
        overall.add(c);
        if high_oov.contains(&slot.name) {
            subset.add(c);
        }
        per_slot.insert(slot.name.clone(), c.scores());
    }
    Ok(SlotMetrics {
        overall: overall.scores(),
        per_slot,
        high_oov: (!high_oov.is_empty()).then(|| subset.scores()),
    })
}

/// Unweighted mean of per-run scores. SPA averages over runs that have it.
pub fn mean_scores(runs: &[SlotScores]) -> Option<SlotScores> {
    if runs.is_empty() {
        return None;
    }
    let k = runs.len() as f64;
    let spa: Vec<f64> = runs.iter().filter_map(|r| r.spa).collect();
    Some(SlotScores {
        sa: runs.iter().map(|r| r.sa).sum::<f64>() / k,
        sga: runs.iter().map(|r| r.sga).sum::<f64>() / k,
        spa: (!spa.is_empty()).then(|| spa.iter().sum::<f64>() / spa.len() as f64),
        instances: runs.iter().map(|r| r.instances).sum(),
        span_instances: runs.iter().map(|r| r.span_instances).sum(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ontology::SlotDef;

    fn ontology() -> Ontology {
        Ontology::new(vec![SlotDef::categorical("a-x"), SlotDef::categorical("a-y")]).unwrap()
    }

    fn turn(i: usize, x: &str, gates: [GateClass; 2]) -> (TurnPrediction, GoldTurn) {
        let state: DialogState = [("a-x".to_string(), x.to_string())].into_iter().collect();
        let spans: Vec<_> = gates
            .iter()
            .map(|&g| (g == GateClass::Span).then_some((1, 1)))
            .collect();
        (
            TurnPrediction {
                dialog_id: "d".into(),
                turn_index: i,
                state: state.clone(),
                gates: gates.to_vec(),
                spans: spans.clone(),
            },
            GoldTurn {
                dialog_id: "d".into(),
                turn_index: i,
                state,
                gates: gates.to_vec(),
                spans,
            },
        )
    }

    #[test]
    fn middle_turn_wrong() {
        let o = ontology();
        let (mut preds, gold): (Vec<_>, Vec<_>) = (0..3)
            .map(|i| turn(i, "north", [GateClass::Span, GateClass::None]))
            .unzip();
        preds[1].state.set("a-y", "south");
        assert!((joint_goal_accuracy(&preds, &gold, &o).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        let m = slot_metrics(&preds, &gold, &o, &[]).unwrap();
        assert_eq!(m.overall.sa, 5.0 / 6.0);
        assert_eq!(m.per_slot["a-y"].sa, 2.0 / 3.0);
        assert_eq!(m.overall.spa, Some(1.0));
    }

    #[test]
    fn case_and_whitespace_are_ignored() {
        let o = ontology();
        let (mut p, g) = turn(0, "North ", [GateClass::Span, GateClass::None]);
        p.state.set("a-x", " north");
        assert_eq!(joint_goal_accuracy(&[p], &[g], &o).unwrap(), 1.0);
    }

    #[test]
    fn missing_and_duplicate_turns() {
        let o = ontology();
        let (p0, g0) = turn(0, "v", [GateClass::None; 2]);
        let (_, g1) = turn(1, "v", [GateClass::None; 2]);
        let err = joint_goal_accuracy(std::slice::from_ref(&p0), &[g0.clone(), g1], &o).unwrap_err();
        assert!(err.to_string().contains("turn 1"));
        assert!(joint_goal_accuracy(&[p0.clone(), p0], &[g0], &o).is_err());
    }
}
