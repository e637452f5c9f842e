//! Out-of-task training for dialog state tracking.

pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod heads;
pub mod model;
pub mod ontology;
pub mod params;
pub mod seed;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
