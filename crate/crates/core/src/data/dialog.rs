//! Dialog corpus format.
//!
//! One JSON document per corpus:
//!
//! ```json
//! {
//!   "ontology": { "slots": [ { "name": "hotel-area", "kind": "categorical" } ] },
//!   "dialogs": [
//!     { "id": "d0", "turns": [
//!       { "turn_index": 0, "system_utterance": "", "user_utterance": "...",
//!         "gold_state": { "hotel-area": "north" }, "system_informs": {} } ] } ]
//! }
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ontology::{DialogState, Ontology, SlotKind, DONTCARE, FALSE, TRUE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogTurn {
    pub turn_index: usize,
    #[serde(default)]
    pub system_utterance: String,
    pub user_utterance: String,
    #[serde(default)]
    pub gold_state: DialogState,
    /// Values the system offered this turn.
    #[serde(default)]
    pub system_informs: DialogState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dialog {
    pub id: String,
    pub turns: Vec<DialogTurn>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogCorpus {
    pub ontology: Ontology,
    pub dialogs: Vec<Dialog>,
}

impl DialogCorpus {
    pub fn validate(&self, path: &str) -> Result<()> {
        self.ontology.validate()?;
        for d in &self.dialogs {
            for (i, t) in d.turns.iter().enumerate() {
                if t.turn_index != i {
                    return Err(Error::Schema {
                        path: path.to_string(),
                        message: format!("dialog {} turn {i}: turn_index is {}", d.id, t.turn_index),
                    });
                }
                for (slot, value) in t.gold_state.iter().chain(t.system_informs.iter()) {
                    let Some(def) = self.ontology.slot(slot) else {
                        return Err(Error::UnknownSlot {
                            slot: slot.clone(),
                            dialog: d.id.clone(),
                            turn: i,
                        });
                    };
                    if def.kind == SlotKind::Boolean && ![TRUE, FALSE, DONTCARE].contains(&value.as_str()) {
                        return Err(Error::Schema {
                            path: path.to_string(),
                            message: format!("dialog {} turn {i}: boolean slot `{slot}` holds `{value}`", d.id),
                        });
                    }
                }
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str, path: &str) -> Result<Self> {
        let c: DialogCorpus = serde_json::from_str(text).map_err(|e| Error::Schema {
            path: path.to_string(),
            message: e.to_string(),
        })?;
        c.validate(path)?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| Error::io(&path, e))?;
        Self::from_json(&text, &path.as_ref().display().to_string())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn num_turns(&self) -> usize {
        self.dialogs.iter().map(|d| d.turns.len()).sum()
    }

    /// Every utterance, for tokenizer training.
    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.dialogs.iter().flat_map(|d| {
            d.turns
                .iter()
                .flat_map(|t| [t.system_utterance.as_str(), t.user_utterance.as_str()])
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ontology::SlotDef;

    fn corpus() -> DialogCorpus {
        let ontology = Ontology::new(vec![
            SlotDef::categorical("hotel-area"),
            SlotDef::boolean("hotel-parking"),
        ])
        .unwrap();
        let mut s = DialogState::new();
        s.set("hotel-area", "north");
        let turn = |i: usize, state: &DialogState| DialogTurn {
            turn_index: i,
            system_utterance: String::new(),
            user_utterance: "a hotel in the north".into(),
            gold_state: state.clone(),
            system_informs: DialogState::new(),
        };
        DialogCorpus {
            ontology,
            dialogs: vec![
                Dialog {
                    id: "a".into(),
                    turns: vec![turn(0, &s), turn(1, &s)],
                },
                Dialog {
                    id: "b".into(),
                    turns: vec![turn(0, &DialogState::new())],
                },
            ],
        }
    }

    #[test]
    fn json_round_trip() {
        let c = corpus();
        let back = DialogCorpus::from_json(&c.to_json().unwrap(), "mem").unwrap();
        assert_eq!(back, c);
        let empty = DialogCorpus {
            ontology: c.ontology.clone(),
            dialogs: vec![],
        };
        assert_eq!(
            DialogCorpus::from_json(&empty.to_json().unwrap(), "mem")
                .unwrap()
                .dialogs
                .len(),
            0
        );
    }

    #[test]
    fn unknown_slot_is_named() {
        let mut c = corpus();
        c.dialogs[0].turns[1].gold_state.set("taxi-time", "noon");
        let err = DialogCorpus::from_json(&c.to_json().unwrap(), "mem").unwrap_err();
        assert!(err.to_string().contains("taxi-time"));
        assert!(err.to_string().contains("turn 1"));
    }

    #[test]
    fn bad_turn_order_is_a_schema_error() {
        let mut c = corpus();
        c.dialogs[0].turns[1].turn_index = 5;
        let err = DialogCorpus::from_json(&c.to_json().unwrap(), "x.json").unwrap_err();
        assert!(matches!(err, Error::Schema { .. }));
    }
}
