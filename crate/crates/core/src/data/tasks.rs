//! Auxiliary task formats: tab-separated classification files and span QA
//! documents with paragraphs, questions and answer offsets.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::features::InputConfig;
use crate::error::{Error, Result};
use crate::heads::AuxHead;
use crate::tokenizer::{BpeModel, TokenizedSequence};

/// Default input length for span QA.
pub const SPAN_MAX_LEN: usize = 384;
/// Default input length for classification.
pub const CLS_MAX_LEN: usize = 128;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassificationExample {
    pub text_a: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_b: Option<String>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassificationTask {
    pub num_classes: usize,
    pub examples: Vec<ClassificationExample>,
}

#[derive(Deserialize)]
struct TsvRow {
    text_a: String,
    #[serde(default)]
    text_b: Option<String>,
    label: String,
}

impl ClassificationTask {
    pub fn new(num_classes: usize, examples: Vec<ClassificationExample>) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Config(format!("need >= 2 classes, got {num_classes}")));
        }
        if let Some((i, e)) = examples.iter().enumerate().find(|(_, e)| e.label >= num_classes) {
            return Err(Error::Invalid(format!(
                "example {i} has label {} but the task has {num_classes} classes",
                e.label
            )));
        }
        Ok(ClassificationTask { num_classes, examples })
    }

    pub fn is_pair(&self) -> bool {
        self.examples.iter().any(|e| e.text_b.is_some())
    }

    /// Parse a TSV with a header naming `text_a`, optional `text_b` and
    /// `label` (an integer class id). `num_classes` defaults to the largest
    /// label plus one.
    pub fn from_tsv(text: &str, path: &str, num_classes: Option<usize>) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .delimiter(b'\t')
            .quoting(false)
            .from_reader(text.as_bytes());
        let mut examples = Vec::new();
        for (i, row) in reader.deserialize::<TsvRow>().enumerate() {
            let row = row.map_err(|e| Error::Schema {
                path: path.to_string(),
                message: format!("row {}: {e}", i + 1),
            })?;
            let label = row.label.trim().parse().map_err(|_| Error::Schema {
                path: path.to_string(),
                message: format!("row {}: label `{}` is not a class id", i + 1, row.label),
            })?;
            examples.push(ClassificationExample {
                text_a: row.text_a,
                text_b: row.text_b.filter(|t| !t.is_empty()),
                label,
            });
        }
        let inferred = examples.iter().map(|e| e.label + 1).max().unwrap_or(2).max(2);
        Self::new(num_classes.unwrap_or(inferred), examples)
    }

    pub fn load(path: impl AsRef<Path>, num_classes: Option<usize>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| Error::io(&path, e))?;
        Self::from_tsv(&text, &path.as_ref().display().to_string(), num_classes)
    }

    pub fn to_tsv(&self) -> Result<String> {
        let pair = self.is_pair();
        let mut w = csv::WriterBuilder::new()
            .delimiter(b'\t')
            .quote_style(csv::QuoteStyle::Never)
            .from_writer(Vec::new());
        if pair {
            w.write_record(["text_a", "text_b", "label"])?;
        } else {
            w.write_record(["text_a", "label"])?;
        }
        for e in &self.examples {
            let label = e.label.to_string();
            if pair {
                w.write_record([e.text_a.as_str(), e.text_b.as_deref().unwrap_or(""), &label])?;
            } else {
                w.write_record([e.text_a.as_str(), &label])?;
            }
        }
        let bytes = w.into_inner().map_err(|e| Error::Invalid(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Invalid(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.to_tsv()?).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpanExample {
    pub id: String,
    pub question: String,
    pub paragraph: String,
    /// Char range of the answer in `paragraph`, `None` when unanswerable.
    pub answer: Option<(usize, usize)>,
}

impl SpanExample {
    pub fn answer_text(&self) -> Option<String> {
        self.answer
            .map(|(s, e)| self.paragraph.chars().skip(s).take(e - s).collect())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct QaAnswer {
    text: String,
    answer_start: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct QaItem {
    id: String,
    question: String,
    #[serde(default)]
    answers: Vec<QaAnswer>,
    #[serde(default)]
    is_impossible: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct QaParagraph {
    context: String,
    qas: Vec<QaItem>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct QaArticle {
    #[serde(default)]
    title: String,
    paragraphs: Vec<QaParagraph>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct QaDocument {
    #[serde(default)]
    version: String,
    data: Vec<QaArticle>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpanTask {
    pub examples: Vec<SpanExample>,
}

impl SpanTask {
    pub fn from_json(text: &str, path: &str) -> Result<Self> {
        let schema = |message: String| Error::Schema {
            path: path.to_string(),
            message,
        };
        let doc: QaDocument = serde_json::from_str(text).map_err(|e| schema(e.to_string()))?;
        let mut examples = Vec::new();
        for article in doc.data {
            for p in article.paragraphs {
                let len = p.context.chars().count();
                for q in p.qas {
                    let answer = match (q.is_impossible, q.answers.first()) {
                        (true, _) | (false, None) => None,
                        (false, Some(a)) => {
                            let end = a.answer_start + a.text.chars().count();
                            let found: String = p
                                .context
                                .chars()
                                .skip(a.answer_start)
                                .take(end - a.answer_start)
                                .collect();
                            if end > len || found != a.text {
                                return Err(schema(format!(
                                    "question {}: answer `{}` not at offset {}",
                                    q.id, a.text, a.answer_start
                                )));
                            }
                            Some((a.answer_start, end))
                        }
                    };
                    examples.push(SpanExample {
                        id: q.id,
                        question: q.question,
                        paragraph: p.context.clone(),
                        answer,
                    });
                }
            }
        }
        Ok(SpanTask { examples })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| Error::io(&path, e))?;
        Self::from_json(&text, &path.as_ref().display().to_string())
    }

    /// One paragraph entry per example.
    pub fn to_json(&self) -> Result<String> {
        let paragraphs = self
            .examples
            .iter()
            .map(|e| QaParagraph {
                context: e.paragraph.clone(),
                qas: vec![QaItem {
                    id: e.id.clone(),
                    question: e.question.clone(),
                    answers: e
                        .answer_text()
                        .map(|text| QaAnswer {
                            text,
                            answer_start: e.answer.map_or(0, |a| a.0),
                        })
                        .into_iter()
                        .collect(),
                    is_impossible: e.answer.is_none(),
                }],
            })
            .collect();
        let doc = QaDocument {
            version: "v2.0".into(),
            data: vec![QaArticle {
                title: "synthetic".into(),
                paragraphs,
            }],
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.to_json()?).map_err(|e| Error::io(path, e))
    }
}

/// An auxiliary task with its data.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AuxTask {
    Classification(ClassificationTask),
    Span(SpanTask),
}

impl AuxTask {
    pub fn head(&self) -> AuxHead {
        match self {
            AuxTask::Classification(t) => AuxHead::Classification {
                num_classes: t.num_classes,
            },
            AuxTask::Span(_) => AuxHead::Span,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            AuxTask::Classification(t) => t.examples.len(),
            AuxTask::Span(t) => t.examples.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn default_max_len(&self) -> usize {
        match self {
            AuxTask::Classification(_) => CLS_MAX_LEN,
            AuxTask::Span(_) => SPAN_MAX_LEN,
        }
    }

    pub fn texts(&self) -> Vec<&str> {
        match self {
            AuxTask::Classification(t) => t
                .examples
                .iter()
                .flat_map(|e| std::iter::once(e.text_a.as_str()).chain(e.text_b.as_deref()))
                .collect(),
            AuxTask::Span(t) => t
                .examples
                .iter()
                .flat_map(|e| [e.question.as_str(), e.paragraph.as_str()])
                .collect(),
        }
    }

    pub fn features(&self, tokenizer: &BpeModel, input: InputConfig) -> Result<Vec<AuxFeatures>> {
        match self {
            AuxTask::Classification(t) => t
                .examples
                .iter()
                .map(|e| {
                    let seq = match &e.text_b {
                        Some(b) => tokenizer.encode_parts(&[&e.text_a, b], input.max_len, input.segment_ids)?,
                        None => tokenizer.encode_parts(&[&e.text_a], input.max_len, input.segment_ids)?,
                    };
                    Ok(AuxFeatures::Classification { seq, label: e.label })
                })
                .collect(),
            AuxTask::Span(t) => t.examples.iter().map(|e| span_features(e, tokenizer, input)).collect(),
        }
    }
}

/// Encoded auxiliary example.
#[derive(Debug, Clone, PartialEq)]
pub enum AuxFeatures {
    Classification {
        seq: TokenizedSequence,
        label: usize,
    },
    /// `target` is `(0, 0)`, the `CLS` position, for unanswerable questions
    /// and answers lost to truncation.
    Span {
        seq: TokenizedSequence,
        valid: Vec<bool>,
        target: (usize, usize),
    },
}

impl AuxFeatures {
    pub fn seq(&self) -> &TokenizedSequence {
        match self {
            AuxFeatures::Classification { seq, .. } | AuxFeatures::Span { seq, .. } => seq,
        }
    }
}

/// Encode `CLS question SEP paragraph SEP`; `CLS` and paragraph tokens are
/// selectable.
pub fn span_features(e: &SpanExample, tokenizer: &BpeModel, input: InputConfig) -> Result<AuxFeatures> {
    let seq = tokenizer.encode_parts(&[&e.question, &e.paragraph], input.max_len, input.segment_ids)?;
    let valid: Vec<bool> = seq
        .part
        .iter()
        .enumerate()
        .map(|(i, p)| i == 0 || *p == Some(1))
        .collect();
    let offset = seq.part_offsets[1];
    let target = match e.answer {
        Some((s, end)) => seq.char_span_to_token_span(offset + s, offset + end)?.unwrap_or((0, 0)),
        None => (0, 0),
    };
    Ok(AuxFeatures::Span { seq, valid, target })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tsv_round_trip_pair_and_single() {
        let text = "text_a\ttext_b\tlabel\nthe cat sat\ta cat sat\t0\nrain today\tsunny skies\t2\n";
        let t = ClassificationTask::from_tsv(text, "mem", None).unwrap();
        assert_eq!(t.num_classes, 3);
        assert!(t.is_pair());
        assert_eq!(
            ClassificationTask::from_tsv(&t.to_tsv().unwrap(), "mem", None).unwrap(),
            t
        );

        let single = ClassificationTask::from_tsv("text_a\tlabel\ngood\t1\nbad\t0\n", "mem", None).unwrap();
        assert!(!single.is_pair());
        assert_eq!(single.examples[0].label, 1);
        assert!(ClassificationTask::from_tsv("text_a\tlabel\ngood\tpositive\n", "mem", None).is_err());
        assert!(ClassificationTask::from_tsv("text_a\tlabel\ngood\t4\n", "mem", Some(3)).is_err());
    }

    #[test]
    fn qa_round_trip_and_offset_check() {
        let t = SpanTask {
            examples: vec![
                SpanExample {
                    id: "q1".into(),
                    question: "where is the inn ?".into(),
                    paragraph: "the inn is in dovelo .".into(),
                    answer: Some((14, 20)),
                },
                SpanExample {
                    id: "q2".into(),
                    question: "where is the bar ?".into(),
                    paragraph: "the inn is in dovelo .".into(),
                    answer: None,
                },
            ],
        };
        assert_eq!(t.examples[0].answer_text().as_deref(), Some("dovelo"));
        let back = SpanTask::from_json(&t.to_json().unwrap(), "mem").unwrap();
        assert_eq!(back, t);
        let bad = t
            .to_json()
            .unwrap()
            .replace("\"answer_start\": 14", "\"answer_start\": 3");
        assert!(SpanTask::from_json(&bad, "mem").is_err());
    }

    #[test]
    fn span_target_maps_to_paragraph_tokens() {
        let e = SpanExample {
            id: "q".into(),
            question: "where is the inn ?".into(),
            paragraph: "the inn is in dovelo .".into(),
            answer: Some((14, 20)),
        };
        let tok = BpeModel::train([e.question.as_str(), e.paragraph.as_str()], 60).unwrap();
        let AuxFeatures::Span { seq, valid, target } = span_features(&e, &tok, InputConfig::default()).unwrap() else {
            unreachable!()
        };
        assert_eq!(seq.detokenize(target.0, target.1), "dovelo");
        assert!(valid[0] && valid[target.0] && valid[target.1]);
        assert!(!valid[1]);

        let short = span_features(
            &e,
            &tok,
            InputConfig {
                max_len: 8,
                segment_ids: false,
            },
        )
        .unwrap();
        let AuxFeatures::Span { target, .. } = short else {
            unreachable!()
        };
        assert_eq!(target, (0, 0));
    }
}
