//! Domain-slot inventory and dialog states.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DONTCARE: &str = "dontcare";
pub const TRUE: &str = "true";
pub const FALSE: &str = "false";
pub const NONE: &str = "none";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SlotKind {
    Categorical,
    Boolean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotDef {
    /// `domain-slot`, e.g. `restaurant-pricerange`.
    pub name: String,
    pub kind: SlotKind,
    /// Slots whose value this slot may copy.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub refer_targets: Vec<String>,
}

impl SlotDef {
    pub fn categorical(name: &str) -> Self {
        SlotDef {
            name: name.to_string(),
            kind: SlotKind::Categorical,
            refer_targets: Vec::new(),
        }
    }

    pub fn boolean(name: &str) -> Self {
        SlotDef {
            name: name.to_string(),
            kind: SlotKind::Boolean,
            refer_targets: Vec::new(),
        }
    }

    pub fn with_refer(mut self, targets: &[&str]) -> Self {
        self.refer_targets = targets.iter().map(|s| s.to_string()).collect();
        self
    }

    pub fn domain(&self) -> &str {
        self.name.split_once('-').map_or(self.name.as_str(), |(d, _)| d)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Ontology {
    pub slots: Vec<SlotDef>,
}

impl Ontology {
    pub fn new(slots: Vec<SlotDef>) -> Result<Self> {
        let o = Ontology { slots };
        o.validate()?;
        Ok(o)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for s in &self.slots {
            if s.name.is_empty() || s.name.contains(char::is_whitespace) {
                return Err(Error::Config(format!("bad slot name `{}`", s.name)));
            }
            if !seen.insert(s.name.as_str()) {
                return Err(Error::Config(format!("duplicate slot `{}`", s.name)));
            }
        }
        for s in &self.slots {
            if s.kind == SlotKind::Boolean && !s.refer_targets.is_empty() {
                return Err(Error::Config(format!("boolean slot `{}` cannot refer", s.name)));
            }
            for t in &s.refer_targets {
                if t == &s.name {
                    return Err(Error::Config(format!("slot `{t}` refers to itself")));
                }
                match self.slot(t) {
                    Some(def) if def.kind == SlotKind::Categorical => {}
                    Some(_) => return Err(Error::Config(format!("refer target `{t}` of `{}` is boolean", s.name))),
                    None => return Err(Error::Config(format!("unknown refer target `{t}` of `{}`", s.name))),
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn slot(&self, name: &str) -> Option<&SlotDef> {
        self.slots.iter().find(|s| s.name == name)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.slots.iter().position(|s| s.name == name)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| Error::io(&path, e))?;
        let o: Ontology = serde_json::from_str(&text).map_err(|e| Error::Schema {
            path: path.as_ref().display().to_string(),
            message: e.to_string(),
        })?;
        o.validate()?;
        Ok(o)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path.as_ref(), text).map_err(|e| Error::io(path, e))
    }
}

/// Case-folded, whitespace-trimmed comparison form of a slot value.
pub fn normalize_value(v: &str) -> String {
    v.trim().to_lowercase()
}

pub fn values_match(a: &str, b: &str) -> bool {
    normalize_value(a) == normalize_value(b)
}

/// Slot -> value assignment. Absent slots hold `none`.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DialogState(BTreeMap<String, String>);

impl DialogState {
    pub fn new() -> Self {
        DialogState(BTreeMap::new())
    }

    pub fn get(&self, slot: &str) -> Option<&str> {
        self.0.get(slot).map(String::as_str)
    }

    /// Set a value; `none` or empty clears the slot.
    pub fn set(&mut self, slot: &str, value: &str) {
        let norm = normalize_value(value);
        if norm.is_empty() || norm == NONE {
            self.0.remove(slot);
        } else {
            self.0.insert(slot.to_string(), value.trim().to_string());
        }
    }

    pub fn clear(&mut self, slot: &str) {
        self.0.remove(slot);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &String)> {
        self.0.iter()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Whether `slot` holds the same normalized value in both states.
    pub fn slot_matches(&self, other: &DialogState, slot: &str) -> bool {
        match (self.get(slot), other.get(slot)) {
            (None, None) => true,
            (Some(a), Some(b)) => values_match(a, b),
            _ => false,
        }
    }

    /// Equality on every slot of `ontology`.
    pub fn matches(&self, other: &DialogState, ontology: &Ontology) -> bool {
        ontology.slots.iter().all(|s| self.slot_matches(other, &s.name))
    }
}

impl FromIterator<(String, String)> for DialogState {
    fn from_iter<I: IntoIterator<Item = (String, String)>>(iter: I) -> Self {
        let mut s = DialogState::new();
        for (k, v) in iter {
            s.set(&k, &v);
        }
        s
    }
}
