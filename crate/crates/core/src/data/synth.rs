//! Seeded synthetic corpora: template dialogs over pseudo-word slot values,
//! keyword classification tasks and single-fact span QA.
//!
//! Dialog values are drawn from per-slot pools of invented words. Training
//! dialogs use a slot's seen pool; dev and test draws are out-of-vocabulary
//! with an exact quota of `round(oov_rate * draws)` per slot, taken from a
//! disjoint held-out pool.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dialog::{Dialog, DialogCorpus, DialogTurn};
use super::tasks::{ClassificationExample, ClassificationTask, SpanExample, SpanTask};
use crate::error::{Error, Result};
use crate::ontology::{normalize_value, DialogState, Ontology, SlotDef, SlotKind, DONTCARE, FALSE, TRUE};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSlot {
    pub name: String,
    pub kind: SlotKind,
    #[serde(default)]
    pub refer_targets: Vec<String>,
    /// Size of the seen and of the held-out value pool.
    #[serde(default = "default_pool")]
    pub values: usize,
    /// Fraction of dev/test value draws taken from the held-out pool.
    #[serde(default)]
    pub oov_rate: f64,
}

fn default_pool() -> usize {
    12
}

impl SynthSlot {
    pub fn categorical(name: &str) -> Self {
        SynthSlot {
            name: name.into(),
            kind: SlotKind::Categorical,
            refer_targets: Vec::new(),
            values: default_pool(),
            oov_rate: 0.0,
        }
    }

    pub fn boolean(name: &str) -> Self {
        SynthSlot {
            kind: SlotKind::Boolean,
            ..Self::categorical(name)
        }
    }

    pub fn with_refer(mut self, target: &str) -> Self {
        self.refer_targets.push(target.into());
        self
    }

    pub fn with_oov(mut self, rate: f64) -> Self {
        self.oov_rate = rate;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DialogSynthSpec {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub slots: Vec<SynthSlot>,
    pub max_turns: usize,
}

impl Default for DialogSynthSpec {
    fn default() -> Self {
        DialogSynthSpec {
            train: 500,
            dev: 100,
            test: 100,
            slots: vec![
                SynthSlot::categorical("hotel-area"),
                SynthSlot::categorical("restaurant-area").with_refer("hotel-area"),
                SynthSlot::categorical("restaurant-food"),
                SynthSlot::boolean("hotel-parking"),
            ],
            max_turns: 4,
        }
    }
}

impl DialogSynthSpec {
    pub fn ontology(&self) -> Result<Ontology> {
        Ontology::new(
            self.slots
                .iter()
                .map(|s| SlotDef {
                    name: s.name.clone(),
                    kind: s.kind,
                    refer_targets: s.refer_targets.clone(),
                })
                .collect(),
        )
    }

    fn validate(&self) -> Result<()> {
        self.ontology()?;
        if self.max_turns == 0 {
            return Err(Error::Config("max_turns must be at least 1".into()));
        }
        for s in &self.slots {
            if !(0.0..=1.0).contains(&s.oov_rate) {
                return Err(Error::Config(format!("oov_rate of `{}` outside [0, 1]", s.name)));
            }
            if s.kind == SlotKind::Boolean && s.oov_rate > 0.0 {
                return Err(Error::Config(format!(
                    "slot `{}` has a closed vocabulary and cannot have out-of-vocabulary values",
                    s.name
                )));
            }
            if s.kind == SlotKind::Categorical && s.values == 0 {
                return Err(Error::Config(format!("slot `{}` needs a non-empty value pool", s.name)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DialogSplits {
    pub train: DialogCorpus,
    pub dev: DialogCorpus,
    pub test: DialogCorpus,
}

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

/// Unique invented three-syllable words.
struct WordForge {
    used: HashSet<String>,
}

impl WordForge {
    fn new(reserved: &[&str]) -> Self {
        WordForge {
            used: reserved.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn word(&mut self, rng: &mut ChaCha8Rng) -> String {
        loop {
            let w: String = (0..3)
                .flat_map(|_| {
                    [
                        CONSONANTS[rng.gen_range(0..CONSONANTS.len())] as char,
                        VOWELS[rng.gen_range(0..VOWELS.len())] as char,
                    ]
                })
                .collect();
            if self.used.insert(w.clone()) {
                return w;
            }
        }
    }

    fn words(&mut self, n: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
        (0..n).map(|_| self.word(rng)).collect()
    }
}

fn split_name(slot: &str) -> (&str, &str) {
    slot.split_once('-').unwrap_or(("place", slot))
}

fn attr_noun(attr: &str) -> &str {
    match attr {
        "pricerange" => "price",
        other => other,
    }
}

fn value_phrases(attr: &str) -> Vec<String> {
    let fixed: &[&str] = match attr {
        "area" => &["in the {v} area", "around {v}", "located in {v}"],
        "pricerange" => &["in the {v} price range", "that is {v} priced"],
        "food" => &["serving {v} food", "that does {v} cuisine"],
        "name" => &["called {v}", "named {v}"],
        "type" => &["of type {v}", "that is a {v}"],
        _ => &[],
    };
    if fixed.is_empty() {
        vec![format!("with {} {{v}}", attr_noun(attr))]
    } else {
        fixed.iter().map(|s| s.to_string()).collect()
    }
}

const REQUEST_OPENERS: &[&str] = &["i need a", "i am looking for a", "find me a", "please book a"];
const SYSTEM_FILLERS: &[&str] = &["ok , anything else ?", "sure . what else do you need ?", "noted ."];
const ACCEPTS: &[&str] = &["yes , that works .", "sounds good .", "great , please do ."];
const CLOSINGS: &[&str] = &["thanks , that is all .", "thank you , goodbye ."];

/// Words the templates use; invented values avoid them.
fn template_words() -> Vec<&'static str> {
    let mut words = Vec::new();
    for s in REQUEST_OPENERS
        .iter()
        .chain(SYSTEM_FILLERS)
        .chain(ACCEPTS)
        .chain(CLOSINGS)
    {
        words.extend(s.split_whitespace());
    }
    words.extend([
        "how",
        "about",
        "have",
        "suggestion",
        "for",
        "you",
        "shall",
        "book",
        "it",
        "should",
        "be",
        "same",
        "as",
        "the",
        "any",
        "is",
        "fine",
        "does",
        "not",
        "matter",
        "need",
        "with",
        "free",
        "without",
        "where",
        "located",
        "opens",
        "at",
        "in",
        "what",
        "was",
        "and",
    ]);
    words
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Event {
    Span,
    Offer { silent: bool },
    Dontcare,
    Refer(usize),
    Bool(bool),
}

struct PlannedTurn {
    offer: Option<(usize, Event)>,
    user: Vec<(usize, Event)>,
}

/// Turn layout of one dialog: which slots get set, when and how.
fn plan_dialog(spec: &DialogSynthSpec, ontology: &Ontology, rng: &mut ChaCha8Rng) -> Vec<PlannedTurn> {
    let mut chosen: Vec<usize> = (0..spec.slots.len()).filter(|_| rng.gen_bool(0.75)).collect();
    if chosen.is_empty() {
        chosen.push(rng.gen_range(0..spec.slots.len()));
    }
    chosen.shuffle(rng);
    let mut turns = Vec::new();
    let mut set_before: HashSet<usize> = HashSet::new();
    let mut queue = chosen.into_iter().peekable();
    while queue.peek().is_some() && turns.len() < spec.max_turns {
        let t = turns.len();
        let mut turn = PlannedTurn {
            offer: None,
            user: Vec::new(),
        };
        let mut this_turn = Vec::new();
        if t > 0 {
            if let Some(&s) = queue.peek() {
                if spec.slots[s].kind == SlotKind::Categorical && rng.gen_bool(0.25) {
                    queue.next();
                    turn.offer = Some((
                        s,
                        Event::Offer {
                            silent: rng.gen_bool(0.5),
                        },
                    ));
                    this_turn.push(s);
                }
            }
        }
        let take = if turn.offer.is_some() {
            rng.gen_range(0..=1)
        } else {
            rng.gen_range(1..=2)
        };
        for _ in 0..take {
            let Some(s) = queue.next() else { break };
            let slot = &spec.slots[s];
            let event = match slot.kind {
                SlotKind::Boolean => {
                    if rng.gen_bool(0.15) {
                        Event::Dontcare
                    } else {
                        Event::Bool(rng.gen_bool(0.5))
                    }
                }
                SlotKind::Categorical => {
                    let target = slot
                        .refer_targets
                        .iter()
                        .filter_map(|n| ontology.index_of(n))
                        .find(|i| set_before.contains(i));
                    match target {
                        Some(i) if rng.gen_bool(0.5) => Event::Refer(i),
                        _ if rng.gen_bool(0.15) => Event::Dontcare,
                        _ => Event::Span,
                    }
                }
            };
            turn.user.push((s, event));
            this_turn.push(s);
        }
        set_before.extend(this_turn);
        turns.push(turn);
    }
    if turns.len() < spec.max_turns && rng.gen_bool(0.3) {
        turns.push(PlannedTurn {
            offer: None,
            user: Vec::new(),
        });
    }
    turns
}

fn draws(e: Event) -> bool {
    matches!(e, Event::Span | Event::Offer { .. })
}

struct Pools {
    seen: Vec<Vec<String>>,
    held_out: Vec<Vec<String>>,
}

fn render_dialog(
    id: String,
    spec: &DialogSynthSpec,
    plan: &[PlannedTurn],
    values: &mut impl Iterator<Item = String>,
    rng: &mut ChaCha8Rng,
) -> Dialog {
    let mut state = DialogState::new();
    let mut turns = Vec::with_capacity(plan.len());
    for (t, pt) in plan.iter().enumerate() {
        let mut informs = DialogState::new();
        let system = match pt.offer {
            Some((s, Event::Offer { silent })) => {
                let (domain, attr) = split_name(&spec.slots[s].name);
                let v = values.next().expect("value per draw");
                informs.set(&spec.slots[s].name, &v);
                state.set(&spec.slots[s].name, &v);
                if silent {
                    format!(
                        "i have a {domain} {} suggestion for you . shall i book it ?",
                        attr_noun(attr)
                    )
                } else {
                    let phrase = value_phrases(attr).choose(rng).expect("phrase").replace("{v}", &v);
                    format!("how about a {domain} {phrase} ?")
                }
            }
            _ if t == 0 => String::new(),
            _ => SYSTEM_FILLERS.choose(rng).expect("filler").to_string(),
        };
        let mut sentences = Vec::new();
        if pt.offer.is_some() {
            sentences.push(ACCEPTS.choose(rng).expect("accept").to_string());
        }
        for &(s, event) in &pt.user {
            let name = &spec.slots[s].name;
            let (domain, attr) = split_name(name);
            let noun = attr_noun(attr);
            let opener = REQUEST_OPENERS.choose(rng).expect("opener");
            let sentence = match event {
                Event::Span => {
                    let v = values.next().expect("value per draw");
                    state.set(name, &v);
                    let phrase = value_phrases(attr).choose(rng).expect("phrase").replace("{v}", &v);
                    format!("{opener} {domain} {phrase} .")
                }
                Event::Dontcare => {
                    state.set(name, DONTCARE);
                    match spec.slots[s].kind {
                        SlotKind::Boolean => format!("{noun} does not matter for the {domain} ."),
                        SlotKind::Categorical => format!("any {noun} is fine for the {domain} ."),
                    }
                }
                Event::Refer(target) => {
                    let tname = &spec.slots[target].name;
                    let (tdomain, _) = split_name(tname);
                    let v = state.get(tname).expect("refer target set earlier").to_string();
                    state.set(name, &v);
                    format!("{opener} {domain} , it should be in the same {noun} as the {tdomain} .")
                }
                Event::Bool(b) => {
                    state.set(name, if b { TRUE } else { FALSE });
                    if b {
                        format!("{opener} {domain} with free {noun} .")
                    } else {
                        format!("{opener} {domain} without {noun} .")
                    }
                }
                Event::Offer { .. } => unreachable!("offers are system side"),
            };
            sentences.push(sentence);
        }
        if sentences.is_empty() {
            sentences.push(CLOSINGS.choose(rng).expect("closing").to_string());
        }
        turns.push(DialogTurn {
            turn_index: t,
            system_utterance: system,
            user_utterance: sentences.join(" "),
            gold_state: state.clone(),
            system_informs: informs,
        });
    }
    Dialog { id, turns }
}

fn generate_split(
    name: &str,
    n: usize,
    spec: &DialogSynthSpec,
    ontology: &Ontology,
    pools: &Pools,
    train_values: Option<&[Vec<String>]>,
    rng: &mut ChaCha8Rng,
) -> Result<DialogCorpus> {
    let plans: Vec<Vec<PlannedTurn>> = (0..n).map(|_| plan_dialog(spec, ontology, rng)).collect();

    let mut per_slot_draws = vec![0usize; spec.slots.len()];
    for plan in &plans {
        for pt in plan {
            for &(s, e) in pt.offer.iter().chain(&pt.user) {
                if draws(e) {
                    per_slot_draws[s] += 1;
                }
            }
        }
    }
    let mut slot_values: Vec<std::vec::IntoIter<String>> = Vec::with_capacity(spec.slots.len());
    for (s, slot) in spec.slots.iter().enumerate() {
        let k = per_slot_draws[s];
        let vals: Vec<String> = match train_values {
            None => (0..k)
                .map(|_| pools.seen[s].choose(rng).expect("pool").clone())
                .collect(),
            Some(seen) => {
                let n_oov = (slot.oov_rate * k as f64).round() as usize;
                if k > n_oov && seen[s].is_empty() {
                    return Err(Error::Config(format!(
                        "slot `{}` has no training values to reuse in {name}",
                        slot.name
                    )));
                }
                let mut flags: Vec<bool> = (0..k).map(|i| i < n_oov).collect();
                flags.shuffle(rng);
                flags
                    .into_iter()
                    .map(|oov| {
                        if oov {
                            pools.held_out[s].choose(rng).expect("pool").clone()
                        } else {
                            seen[s].choose(rng).expect("seen").clone()
                        }
                    })
                    .collect()
            }
        };
        slot_values.push(vals.into_iter());
    }

    let mut dialogs = Vec::with_capacity(n);
    for (i, plan) in plans.iter().enumerate() {
        let mut order = Vec::new();
        for pt in plan {
            for &(s, e) in pt.offer.iter().chain(&pt.user) {
                if draws(e) {
                    order.push(slot_values[s].next().expect("value per draw"));
                }
            }
        }
        dialogs.push(render_dialog(
            format!("{name}-{i:04}"),
            spec,
            plan,
            &mut order.into_iter(),
            rng,
        ));
    }
    Ok(DialogCorpus {
        ontology: ontology.clone(),
        dialogs,
    })
}

/// Train, dev and test dialogs. Same `seed`, same corpus.
pub fn synth_dialogs(spec: &DialogSynthSpec, seed: u64) -> Result<DialogSplits> {
    spec.validate()?;
    let ontology = spec.ontology()?;
    let mut rng = seed::rng(seed::derive(seed, "synth-dialog"));
    let mut forge = WordForge::new(&template_words());
    let pools = Pools {
        seen: spec.slots.iter().map(|s| forge.words(s.values, &mut rng)).collect(),
        held_out: spec
            .slots
            .iter()
            .map(|s| forge.words(if s.oov_rate > 0.0 { s.values } else { 0 }, &mut rng))
            .collect(),
    };
    let train = generate_split("train", spec.train, spec, &ontology, &pools, None, &mut rng)?;
    let seen: Vec<Vec<String>> = spec
        .slots
        .iter()
        .map(|s| slot_values(&train, &s.name).into_iter().collect())
        .collect();
    let dev = generate_split("dev", spec.dev, spec, &ontology, &pools, Some(&seen), &mut rng)?;
    let test = generate_split("test", spec.test, spec, &ontology, &pools, Some(&seen), &mut rng)?;
    Ok(DialogSplits { train, dev, test })
}

/// Values newly taken by `slot` in `corpus`, one entry per change, leaving
/// out literals and values copied from a refer target.
pub fn value_occurrences(corpus: &DialogCorpus, slot: &str) -> Vec<String> {
    let targets = corpus
        .ontology
        .slot(slot)
        .map(|s| s.refer_targets.clone())
        .unwrap_or_default();
    let mut out = Vec::new();
    for d in &corpus.dialogs {
        let mut prev = DialogState::new();
        for t in &d.turns {
            if let Some(v) = t.gold_state.get(slot) {
                let norm = normalize_value(v);
                let changed = !t.gold_state.slot_matches(&prev, slot);
                let literal = [DONTCARE, TRUE, FALSE].contains(&norm.as_str());
                let copied = targets
                    .iter()
                    .any(|tg| t.gold_state.get(tg).is_some_and(|x| normalize_value(x) == norm));
                if changed && !literal && !copied {
                    out.push(norm);
                }
            }
            prev = t.gold_state.clone();
        }
    }
    out
}

pub fn slot_values(corpus: &DialogCorpus, slot: &str) -> BTreeSet<String> {
    value_occurrences(corpus, slot).into_iter().collect()
}

/// Fraction of `eval`'s value occurrences for `slot` never seen in `train`;
/// `None` when the slot takes no values in `eval`.
pub fn oov_rate(train: &DialogCorpus, eval: &DialogCorpus, slot: &str) -> Option<f64> {
    let seen = slot_values(train, slot);
    let occ = value_occurrences(eval, slot);
    if occ.is_empty() {
        return None;
    }
    Some(occ.iter().filter(|v| !seen.contains(*v)).count() as f64 / occ.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassificationSynthSpec {
    pub train: usize,
    pub dev: usize,
    pub pair: bool,
    pub num_classes: usize,
}

impl Default for ClassificationSynthSpec {
    fn default() -> Self {
        ClassificationSynthSpec {
            train: 400,
            dev: 100,
            pair: false,
            num_classes: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationSplits {
    pub train: ClassificationTask,
    pub dev: ClassificationTask,
}

const CUES: [&[&str]; 3] = [
    &["great", "lovely", "superb", "pleasant"],
    &["awful", "poor", "dreadful", "grim"],
    &["okay", "average", "plain", "ordinary"],
];

/// Single sentences labelled by a class cue word, or sentence pairs
/// labelled same / different / unrelated subject.
pub fn synth_classification(spec: &ClassificationSynthSpec, seed: u64) -> Result<ClassificationSplits> {
    if !(2..=3).contains(&spec.num_classes) {
        return Err(Error::Config(format!(
            "num_classes must be 2 or 3, got {}",
            spec.num_classes
        )));
    }
    let mut rng = seed::rng(seed::derive(seed, "synth-classification"));
    let mut forge = WordForge::new(&template_words());
    let nouns = forge.words(30, &mut rng);
    let colors = forge.words(8, &mut rng);
    let make = |n: usize, rng: &mut ChaCha8Rng| -> Result<ClassificationTask> {
        let examples = (0..n)
            .map(|_| {
                let label = rng.gen_range(0..spec.num_classes);
                let noun = nouns.choose(rng).expect("nouns");
                if spec.pair {
                    let c = colors.choose(rng).expect("colors");
                    let text_a = format!("the {noun} is {c} .");
                    let text_b = match label {
                        0 => format!("the {noun} is {c} ."),
                        1 => {
                            let other = colors.iter().filter(|x| *x != c).collect::<Vec<_>>();
                            format!("the {noun} is {} .", other.choose(rng).expect("colors"))
                        }
                        _ => {
                            let other = nouns.iter().filter(|x| *x != noun).collect::<Vec<_>>();
                            format!("the {} is {c} .", other.choose(rng).expect("nouns"))
                        }
                    };
                    ClassificationExample {
                        text_a,
                        text_b: Some(text_b),
                        label,
                    }
                } else {
                    let cue = CUES[label].choose(rng).expect("cues");
                    let filler = nouns.choose(rng).expect("nouns");
                    ClassificationExample {
                        text_a: format!("the {noun} was {cue} and the {filler} was there ."),
                        text_b: None,
                        label,
                    }
                }
            })
            .collect();
        ClassificationTask::new(spec.num_classes, examples)
    };
    let train = make(spec.train, &mut rng)?;
    let dev = make(spec.dev, &mut rng)?;
    Ok(ClassificationSplits { train, dev })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpanSynthSpec {
    pub train: usize,
    pub dev: usize,
    /// Fraction of questions whose subject is absent from the paragraph.
    pub unanswerable_rate: f64,
    pub facts_per_paragraph: usize,
}

impl Default for SpanSynthSpec {
    fn default() -> Self {
        SpanSynthSpec {
            train: 400,
            dev: 100,
            unanswerable_rate: 0.2,
            facts_per_paragraph: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpanSplits {
    pub train: SpanTask,
    pub dev: SpanTask,
}

/// Paragraphs of "the X is located in Y" facts with a question about one
/// subject.
pub fn synth_span_qa(spec: &SpanSynthSpec, seed: u64) -> Result<SpanSplits> {
    if !(0.0..=1.0).contains(&spec.unanswerable_rate) || spec.facts_per_paragraph == 0 {
        return Err(Error::Config(
            "unanswerable_rate must be in [0, 1] and facts_per_paragraph >= 1".into(),
        ));
    }
    let mut rng = seed::rng(seed::derive(seed, "synth-span"));
    let mut forge = WordForge::new(&template_words());
    let subjects = forge.words(40, &mut rng);
    let places = forge.words(40, &mut rng);
    let make = |split: &str, n: usize, rng: &mut ChaCha8Rng| -> SpanTask {
        let examples = (0..n)
            .map(|i| {
                let picked: Vec<&String> = subjects.choose_multiple(rng, spec.facts_per_paragraph + 1).collect();
                let facts: Vec<(&String, &String)> = picked[..spec.facts_per_paragraph]
                    .iter()
                    .map(|s| (*s, places.choose(rng).expect("places")))
                    .collect();
                let mut paragraph = String::new();
                let mut answer_at = BTreeMap::new();
                for (s, p) in &facts {
                    if !paragraph.is_empty() {
                        paragraph.push(' ');
                    }
                    let prefix = format!("the {s} is located in ");
                    let start = paragraph.chars().count() + prefix.chars().count();
                    answer_at.insert(s.as_str(), (start, start + p.chars().count()));
                    paragraph.push_str(&prefix);
                    paragraph.push_str(p);
                    paragraph.push_str(" .");
                }
                let unanswerable = rng.gen_bool(spec.unanswerable_rate);
                let subject = if unanswerable {
                    picked[spec.facts_per_paragraph]
                } else {
                    facts.choose(rng).expect("facts").0
                };
                SpanExample {
                    id: format!("{split}-{i:04}"),
                    question: format!("where is the {subject} located ?"),
                    paragraph,
                    answer: answer_at.get(subject.as_str()).copied(),
                }
            })
            .collect();
        SpanTask { examples }
    };
    let train = make("train", spec.train, &mut rng);
    let dev = make("dev", spec.dev, &mut rng);
    Ok(SpanSplits { train, dev })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DialogSynthSpec {
        DialogSynthSpec {
            train: 60,
            dev: 30,
            test: 30,
            ..Default::default()
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = synth_dialogs(&small(), 5).unwrap();
        let b = synth_dialogs(&small(), 5).unwrap();
        assert_eq!(a.train.to_json().unwrap(), b.train.to_json().unwrap());
        assert_eq!(a.test.to_json().unwrap(), b.test.to_json().unwrap());
        let c = synth_dialogs(&small(), 6).unwrap();
        assert_ne!(a.train.to_json().unwrap(), c.train.to_json().unwrap());
    }

    #[test]
    fn zero_oov_reuses_training_values() {
        let s = synth_dialogs(&small(), 1).unwrap();
        for slot in &s.train.ontology.slots {
            let seen = slot_values(&s.train, &slot.name);
            assert!(slot_values(&s.test, &slot.name).is_subset(&seen));
        }
    }

    #[test]
    fn closed_vocabulary_cannot_be_oov() {
        let mut spec = small();
        spec.slots[3].oov_rate = 1.0;
        assert!(synth_dialogs(&spec, 0).is_err());
    }

    #[test]
    fn partial_oov_quota() {
        let mut spec = small();
        spec.test = 200;
        spec.slots[2].oov_rate = 0.4;
        let s = synth_dialogs(&spec, 3).unwrap();
        let r = oov_rate(&s.train, &s.test, "restaurant-food").unwrap();
        assert!((r - 0.4).abs() <= 0.02, "{r}");
    }

    #[test]
    fn qa_answers_sit_at_their_offsets() {
        let s = synth_span_qa(&SpanSynthSpec::default(), 2).unwrap();
        let answerable = s.train.examples.iter().filter(|e| e.answer.is_some()).count();
        assert!(answerable > 250 && answerable < 380);
        for e in &s.train.examples {
            if let Some(a) = e.answer_text() {
                assert!(e.paragraph.contains(&format!("located in {a} .")));
            }
        }
    }

    #[test]
    fn classification_labels_in_range() {
        for pair in [false, true] {
            let spec = ClassificationSynthSpec {
                pair,
                num_classes: 3,
                ..Default::default()
            };
            let s = synth_classification(&spec, 4).unwrap();
            assert_eq!(s.train.is_pair(), pair);
            assert!(s.train.examples.iter().all(|e| e.label < 3));
        }
    }
}
