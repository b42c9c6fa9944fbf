//! Versioned JSON checkpoints.
//!
//! Every random stream is a pure function of `(seed, purpose, task, salt)`,
//! so the master seed and the next task index are the complete RNG state.

use std::path::Path;

use ibpcl_core::cl::{ClState, ResultMatrix};
use ibpcl_core::net::{SupervisedModel, VaeModel};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::ExperimentConfig;

pub const FORMAT: &str = "ibpcl-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint: {0}")]
    Json(#[from] serde_json::Error),
    #[error("checkpoint format {format:?} version {version} (expected {FORMAT:?} version {VERSION})")]
    Version { format: String, version: u32 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "problem", content = "state", rename_all = "lowercase")]
pub enum RunState {
    Supervised(ClState<SupervisedModel>),
    Vae(ClState<VaeModel>),
}

impl RunState {
    pub fn next_task(&self) -> usize {
        match self {
            RunState::Supervised(s) => s.next_task,
            RunState::Vae(s) => s.next_task,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub master_seed: u64,
    pub next_task: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ExperimentConfig,
    pub rng: RngState,
    pub results: ResultMatrix,
    pub state: RunState,
}

impl Checkpoint {
    pub fn new(config: ExperimentConfig, results: ResultMatrix, state: RunState) -> Self {
        let rng = RngState {
            master_seed: config.seed,
            next_task: state.next_task(),
        };
        Self {
            format: FORMAT.to_string(),
            version: VERSION,
            config,
            rng,
            results,
            state,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        Ok(serde_json::to_vec(self)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        #[derive(Deserialize)]
        struct Header {
            format: String,
            version: u32,
        }
        let h: Header = serde_json::from_slice(bytes)?;
        if h.format != FORMAT || h.version != VERSION {
            return Err(CheckpointError::Version {
                format: h.format,
                version: h.version,
            });
        }
        Ok(serde_json::from_slice(bytes)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, self.to_bytes()?)?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
