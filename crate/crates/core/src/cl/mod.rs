//! Continual-learning orchestration: the task loop, masked priors,
//! coresets, baselines, metrics and structure statistics.

pub mod coreset;
pub mod metrics;
pub mod model;
pub mod prior;
pub mod structure;
pub mod trainer;

pub use coreset::{coreset_select, CoresetMethod};
pub use metrics::{Metrics, ResultMatrix};
pub use model::ClModel;
pub use prior::{alpha_update, masked_prior_update, PriorStore};
pub use structure::{structure_report, StructureRow, TaskMask};
pub use trainer::{run_baseline, run_stream, ClError, ClState, Mode, TaskReport, TrainConfig};
