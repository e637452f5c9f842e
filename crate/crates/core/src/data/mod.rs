//! Corpora, label construction, synthetic data and batch streams.

pub mod dialog;
pub mod features;
pub mod stream;
pub mod synth;
pub mod tasks;

pub use dialog::{Dialog, DialogCorpus, DialogTurn};
pub use features::{build_corpus_features, build_turn_features, InputConfig, LabelStats, TurnFeatures};
pub use stream::{Batch, TaskBatchStream, BATCH_SIZE};
pub use tasks::{AuxFeatures, AuxTask, ClassificationExample, ClassificationTask, SpanExample, SpanTask};
