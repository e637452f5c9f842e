//! Experiment driver for the `outtask` library: configuration files,
//! checkpoints and the per-mode pipelines behind the command line.

pub mod checkpoint;
pub mod config;
pub mod run;
