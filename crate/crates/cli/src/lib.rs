//! Experiment runner for IBP-masked variational continual learning.
//!
//! Configs are TOML (see [`config`]); runs write CSV/JSON/PGM artifacts and
//! resumable JSON checkpoints (see [`runner`]).

pub mod checkpoint;
pub mod config;
pub mod pgm;
pub mod runner;

pub use checkpoint::{Checkpoint, RunState};
pub use config::{ExperimentConfig, Problem, StreamSpec, TaskSplit};
pub use runner::{report, resume, run, run_in, RunError};
