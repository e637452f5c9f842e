//! Batch streams with `next` / `is_last` / `reset`.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::seed;

/// Default examples per batch.
pub const BATCH_SIZE: usize = 32;

/// One batch of example indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    /// Number of resets before this batch was drawn.
    pub pass: u64,
    /// Position within the pass.
    pub index: usize,
    pub items: Vec<usize>,
    pub last: bool,
}

/// Shuffled partition of `0..len` into batches. Each pass is a fresh
/// permutation seeded by `(seed, pass)`.
#[derive(Debug, Clone)]
pub struct TaskBatchStream {
    len: usize,
    batch_size: usize,
    seed: u64,
    pass: u64,
    order: Vec<usize>,
    cursor: usize,
}

impl TaskBatchStream {
    pub fn new(len: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if len == 0 {
            return Err(Error::Invalid("cannot stream an empty dataset".into()));
        }
        if batch_size == 0 {
            return Err(Error::Invalid("batch size must be at least 1".into()));
        }
        let mut s = TaskBatchStream {
            len,
            batch_size,
            seed,
            pass: 0,
            order: (0..len).collect(),
            cursor: 0,
        };
        s.shuffle();
        Ok(s)
    }

    fn shuffle(&mut self) {
        self.order = (0..self.len).collect();
        let mut rng = seed::rng(seed::derive_n(self.seed, "stream-pass", self.pass));
        self.order.shuffle(&mut rng);
        self.cursor = 0;
    }

    pub fn num_batches(&self) -> usize {
        self.len.div_ceil(self.batch_size)
    }

    pub fn pass(&self) -> u64 {
        self.pass
    }

    /// Next batch of the current pass, or `None` once it is used up.
    pub fn next_batch(&mut self) -> Option<Batch> {
        let index = self.cursor;
        if index >= self.num_batches() {
            return None;
        }
        self.cursor += 1;
        let start = index * self.batch_size;
        let end = (start + self.batch_size).min(self.len);
        Some(Batch {
            pass: self.pass,
            index,
            items: self.order[start..end].to_vec(),
            last: index + 1 == self.num_batches(),
        })
    }

    /// Whether the most recent batch closed the pass.
    pub fn is_last(&self) -> bool {
        self.cursor == self.num_batches()
    }

    /// Rewind and reshuffle.
    pub fn reset(&mut self) {
        self.pass += 1;
        self.shuffle();
    }
}
