//! The task loop with on-disk artifacts.
//!
//! A run directory holds:
//! - `config.toml`: the resolved configuration;
//! - `metrics.csv`: one row per `(after_task, eval_task)`, appended right after evaluation;
//! - `R.json`: the result matrix and its summaries;
//! - `structure.csv`: mask sharing and fill per layer;
//! - `checkpoint-task{k}.json` after every task;
//! - `samples-task{k}.pgm` for VAE runs: row `s` holds samples generated for task `s`.
//!
//! Task and layer numbers in these files are 1-based.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use ibpcl_core::cl::{structure_report, ClError, ClModel, ClState, Metrics, ResultMatrix, StructureRow, TrainConfig};
use ibpcl_core::data::{self, DataError, TaskStream};
use ibpcl_core::net::{vae_generate, NetError, SupervisedModel, VaeModel};
use ibpcl_core::rng::{self, Purpose};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError, RunState};
use crate::config::{ConfigError, ExperimentConfig, Problem, StreamSpec, TaskSplit};
use crate::pgm::{emit_pgm, PgmError};

/// Overrides the root that relative `output_dir` values resolve against.
pub const OUTPUT_ROOT_ENV: &str = "IBPCL_OUTPUT_ROOT";

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("data: {0}")]
    Data(#[from] DataError),
    #[error("{source}; state before the failing task saved to {}", checkpoint.display())]
    Numeric {
        #[source]
        source: ClError,
        checkpoint: PathBuf,
    },
    #[error(transparent)]
    Train(#[from] ClError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Pgm(#[from] PgmError),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Report(String),
}

impl RunError {
    /// 2 for configuration and input problems, 3 for numeric failure.
    pub fn exit_code(&self) -> u8 {
        match self {
            RunError::Config(_) | RunError::Data(_) => 2,
            RunError::Numeric { .. } => 3,
            _ => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Where `cfg`'s outputs go, honouring [`OUTPUT_ROOT_ENV`] for relative paths.
pub fn output_dir(cfg: &ExperimentConfig) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if cfg.output_dir.is_relative() => PathBuf::from(root).join(&cfg.output_dir),
        _ => cfg.output_dir.clone(),
    }
}

pub fn build_stream(cfg: &ExperimentConfig) -> Result<TaskStream, DataError> {
    let (train, test, split) = match &cfg.stream {
        StreamSpec::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
            train_per_class,
            test_per_class,
            downsample,
            tasks,
        } => {
            let mut train = data::load_idx_pair(train_images, train_labels)?;
            let mut test = data::load_idx_pair(test_images, test_labels)?;
            if let Some(cap) = train_per_class {
                train = train.cap_per_class(*cap);
            }
            if let Some(cap) = test_per_class {
                test = test.cap_per_class(*cap);
            }
            if let Some(side) = downsample {
                train = data::downsample(&train, *side)?;
                test = data::downsample(&test, *side)?;
            }
            (train, test, tasks)
        }
        StreamSpec::Synthetic {
            generator,
            test_per_class,
            tasks,
        } => {
            let all = data::make_synthetic(generator, cfg.seed)?;
            let (train, test) = all.hold_out(*test_per_class);
            (train, test, tasks)
        }
    };
    match split {
        TaskSplit::Split { groups } => data::make_split_stream(&train, &test, groups),
        TaskSplit::Permuted { tasks } => data::make_permuted_stream(&train, &test, *tasks, cfg.seed),
    }
}

pub fn fresh_state(cfg: &ExperimentConfig, stream: &TaskStream) -> RunState {
    let tc = cfg.train_config();
    let dim = stream.tasks.first().map_or(0, |t| t.train.dim());
    let mut rng = rng::stream(cfg.seed, Purpose::Init, 0, 0);
    let a = &cfg.architecture;
    match cfg.problem {
        Problem::Supervised => {
            let model = SupervisedModel::new(dim, &a.hidden, &tc.init, &mut rng);
            RunState::Supervised(ClState::new(model, &tc))
        }
        Problem::Vae => {
            let model = VaeModel::new(dim, &a.encoder, a.latent, &a.decoder, &tc.init, &mut rng);
            RunState::Vae(ClState::new(model, &tc))
        }
    }
}

/// Contents of `R.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsFile {
    pub mode: String,
    pub seed: u64,
    #[serde(rename = "R")]
    pub r: Vec<Vec<Option<f64>>>,
    /// Present once every task has been evaluated.
    pub metrics: Option<Metrics>,
}

struct Outputs<'a> {
    dir: &'a Path,
    cfg: &'a ExperimentConfig,
}

impl Outputs<'_> {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Truncates `metrics.csv` and replays the completed rows of `r`.
    fn start_metrics(&self, r: &ResultMatrix, done: usize) -> Result<(), RunError> {
        let path = self.path("metrics.csv");
        let mut f = File::create(&path).map_err(io_err(&path))?;
        writeln!(f, "after_task,eval_task,accuracy,mode,seed").map_err(io_err(&path))?;
        for i in 0..done {
            for j in 0..=i {
                if let Ok(v) = r.get(i, j) {
                    writeln!(f, "{}", self.metrics_row(i, j, v)).map_err(io_err(&path))?;
                }
            }
        }
        Ok(())
    }

    fn metrics_row(&self, i: usize, j: usize, v: f64) -> String {
        format!("{},{},{},{},{}", i + 1, j + 1, v, self.cfg.mode.name(), self.cfg.seed)
    }

    fn append_metric(&self, i: usize, j: usize, v: f64) -> Result<(), RunError> {
        let path = self.path("metrics.csv");
        let mut f = OpenOptions::new().append(true).open(&path).map_err(io_err(&path))?;
        writeln!(f, "{}", self.metrics_row(i, j, v)).map_err(io_err(&path))?;
        f.sync_data().map_err(io_err(&path))
    }

    fn write_results(&self, r: &ResultMatrix) -> Result<(), RunError> {
        let file = ResultsFile {
            mode: self.cfg.mode.name().to_string(),
            seed: self.cfg.seed,
            r: r.r.clone(),
            metrics: r.metrics().ok(),
        };
        let path = self.path("R.json");
        let text = serde_json::to_string_pretty(&file).map_err(CheckpointError::from)?;
        std::fs::write(&path, text).map_err(io_err(&path))
    }

    fn write_structure(&self, rows: &[StructureRow]) -> Result<(), RunError> {
        write_structure_csv(&self.path("structure.csv"), rows)
    }
}

pub fn write_structure_csv(path: &Path, rows: &[StructureRow]) -> Result<(), RunError> {
    let mut text = String::from("layer,task_a,task_b,sharing,filled\n");
    for r in rows {
        text += &format!("{},{},{},{},{}\n", r.layer + 1, r.task_a + 1, r.task_b + 1, r.sharing, r.filled);
    }
    std::fs::write(path, text).map_err(io_err(path))
}

/// Writes the generation grid after task `t`: one row per task seen so far.
fn write_grid(state: &ClState<VaeModel>, t: usize, out: &Outputs<'_>) -> Result<(), RunError> {
    let side = (state.model.input_dim() as f64).sqrt().round() as usize;
    let n = out.cfg.grid_samples;
    if side * side != state.model.input_dim() || n == 0 {
        return Ok(());
    }
    let mut images = Vec::new();
    for s in 0..=t {
        let mut rng = rng::stream(out.cfg.seed, Purpose::Generate, t, s as u64);
        let batch = vae_generate(&state.model, s, &state.masks[s].layers, n, &mut rng)?;
        images.extend(batch.data().chunks(side * side).map(<[f64]>::to_vec));
    }
    let refs: Vec<&[f64]> = images.iter().map(Vec::as_slice).collect();
    emit_pgm(&refs, side, side, t + 1, n, &out.path(&format!("samples-task{}.pgm", t + 1)))?;
    Ok(())
}

/// Per-task progress: task index and its row of `R`.
pub type Progress<'a> = &'a mut dyn FnMut(usize, &[f64]);

#[allow(clippy::too_many_arguments)]
fn drive<M: ClModel>(
    state: &mut ClState<M>,
    wrap: fn(ClState<M>) -> RunState,
    stream: &TaskStream,
    tc: &TrainConfig,
    r: &mut ResultMatrix,
    out: &Outputs<'_>,
    progress: Progress<'_>,
    mut extra: impl FnMut(&ClState<M>, usize) -> Result<(), RunError>,
) -> Result<(), RunError> {
    while state.next_task < stream.len() {
        let t = state.next_task;
        let before = state.clone();
        let step = |state: &mut ClState<M>| -> Result<Vec<f64>, ClError> {
            state.train_task(&stream.tasks[t], tc)?;
            let pred = state.prediction_model(tc)?;
            (0..=t)
                .map(|j| state.evaluate_task(&pred, j, &stream.tasks[j].test, tc))
                .collect()
        };
        let row = match step(state) {
            Ok(row) => row,
            Err(source @ ClError::Numeric { .. }) => {
                let checkpoint = out.path("checkpoint-abort.json");
                Checkpoint::new(out.cfg.clone(), r.clone(), wrap(before)).save(&checkpoint)?;
                return Err(RunError::Numeric { source, checkpoint });
            }
            Err(e) => return Err(e.into()),
        };
        for (j, &v) in row.iter().enumerate() {
            r.set(t, j, v);
            out.append_metric(t, j, v)?;
        }
        out.write_results(r)?;
        out.write_structure(&structure_report(&state.masks))?;
        extra(state, t)?;
        let ckpt = Checkpoint::new(out.cfg.clone(), r.clone(), wrap(state.clone()));
        ckpt.save(&out.path(&format!("checkpoint-task{}.json", t + 1)))?;
        progress(t, &row);
    }
    Ok(())
}

fn continue_run(
    cfg: &ExperimentConfig,
    dir: &Path,
    stream: &TaskStream,
    state: RunState,
    mut r: ResultMatrix,
    progress: Progress<'_>,
) -> Result<ResultMatrix, RunError> {
    let out = Outputs { dir, cfg };
    out.start_metrics(&r, state.next_task())?;
    let tc = cfg.train_config();
    match state {
        RunState::Supervised(mut s) => {
            drive(&mut s, RunState::Supervised, stream, &tc, &mut r, &out, progress, |_, _| Ok(()))?;
        }
        RunState::Vae(mut s) => {
            drive(&mut s, RunState::Vae, stream, &tc, &mut r, &out, progress, |s, t| write_grid(s, t, &out))?;
        }
    }
    Ok(r)
}

/// Runs `cfg` from scratch, writing into `dir`.
pub fn run_in(cfg: &ExperimentConfig, dir: &Path, progress: Progress<'_>) -> Result<ResultMatrix, RunError> {
    cfg.validate()?;
    let stream = build_stream(cfg)?;
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let echo = dir.join("config.toml");
    std::fs::write(&echo, cfg.to_toml()).map_err(io_err(&echo))?;
    let state = fresh_state(cfg, &stream);
    continue_run(cfg, dir, &stream, state, ResultMatrix::new(stream.len()), progress)
}

/// Runs `cfg` into [`output_dir`]; returns the directory and `R`.
pub fn run(cfg: &ExperimentConfig, progress: Progress<'_>) -> Result<(PathBuf, ResultMatrix), RunError> {
    let dir = output_dir(cfg);
    let r = run_in(cfg, &dir, progress)?;
    Ok((dir, r))
}

/// Continues the run a checkpoint belongs to, in the checkpoint's directory.
pub fn resume(checkpoint: &Path, progress: Progress<'_>) -> Result<(PathBuf, ResultMatrix), RunError> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let dir = checkpoint.parent().unwrap_or(Path::new(".")).to_path_buf();
    let stream = build_stream(&ckpt.config)?;
    if ckpt.results.tasks() != stream.len() {
        return Err(RunError::Report(format!(
            "checkpoint has {} tasks but the stream has {}",
            ckpt.results.tasks(),
            stream.len()
        )));
    }
    let r = continue_run(&ckpt.config, &dir, &stream, ckpt.state, ckpt.results, progress)?;
    Ok((dir, r))
}

/// What `report` recomputes from a run directory.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub tasks_done: usize,
    pub metrics: Option<Metrics>,
    pub final_acc: Option<f64>,
    pub structure: Vec<StructureRow>,
}

/// Latest `checkpoint-task{k}.json` in `dir`.
pub fn latest_checkpoint(dir: &Path) -> Result<Option<PathBuf>, RunError> {
    let mut best: Option<(usize, PathBuf)> = None;
    for entry in std::fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        let k = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("checkpoint-task")?.strip_suffix(".json")?.parse::<usize>().ok());
        if let Some(k) = k {
            if best.as_ref().is_none_or(|(b, _)| k > *b) {
                best = Some((k, path));
            }
        }
    }
    Ok(best.map(|(_, p)| p))
}

/// Recomputes ACC/FWT/BWT from `R.json` and the structure statistics from the
/// masks of the latest checkpoint; rewrites `structure.csv`.
pub fn report(dir: &Path) -> Result<Report, RunError> {
    let path = dir.join("R.json");
    let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
    let file: ResultsFile = serde_json::from_str(&text).map_err(CheckpointError::from)?;
    let r = ResultMatrix { r: file.r };
    let tasks_done = (0..r.tasks()).take_while(|&i| r.lower_complete(i)).count();
    let masks = match latest_checkpoint(dir)? {
        Some(p) => match Checkpoint::load(&p)?.state {
            RunState::Supervised(s) => s.masks,
            RunState::Vae(s) => s.masks,
        },
        None => Vec::new(),
    };
    let structure = structure_report(&masks);
    write_structure_csv(&dir.join("structure.csv"), &structure)?;
    Ok(Report {
        tasks_done,
        metrics: r.metrics().ok(),
        final_acc: r.final_acc().ok(),
        structure,
    })
}
