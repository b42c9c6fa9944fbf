//! The task loop: masked training, hardening, selective finetuning, prior
//! propagation, coresets and evaluation.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Graph;
use crate::cl::coreset::{coreset_select, CoresetMethod, CoresetTooLarge};
use crate::cl::metrics::ResultMatrix;
use crate::cl::model::ClModel;
use crate::cl::prior::{alpha_update, masked_prior_update, used_columns, DensePrior, PriorStore};
use crate::cl::structure::TaskMask;
use crate::data::{Dataset, Task, TaskStream};
use crate::ibp::{self, union_masks, LayerInit};
use crate::net::{IbpField, NetError, Objective, ParamGroup, ParamId, Pass, Trainable};
use crate::optim::Adam;
use crate::rng::{self, Purpose};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum ClError {
    #[error("task {0} has no training data")]
    EmptyTask(usize),
    #[error("numeric failure in task {task} ({phase}): {source}")]
    Numeric {
        task: usize,
        phase: &'static str,
        #[source]
        source: NetError,
    },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Coreset(#[from] CoresetTooLarge),
    #[error("stream has {stream} tasks but state expects task {next}")]
    StreamExhausted { stream: usize, next: usize },
}

pub type Result<T> = std::result::Result<T, ClError>;

/// Which learner a run trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// IBP-masked model with masked priors.
    Npbcl,
    /// Dense masks, fixed width, plain posterior-as-prior recursion.
    Vcl,
    /// Deterministic maximum-likelihood network trained sequentially.
    Naive,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Npbcl => "npbcl",
            Mode::Vcl => "vcl",
            Mode::Naive => "naive",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "npbcl" => Ok(Mode::Npbcl),
            "vcl" => Ok(Mode::Vcl),
            "naive" => Ok(Mode::Naive),
            other => Err(format!("unknown mode {other:?} (expected npbcl, vcl or naive)")),
        }
    }
}

/// Trainer hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: Mode,
    pub seed: u64,
    pub init: LayerInit,
    /// `σ₀` of the initial prior.
    pub sigma0: f64,
    pub lr_structure: f64,
    pub lr_gaussian: f64,
    pub lr_finetune: f64,
    pub lr_coreset: f64,
    pub temperature_start: f64,
    pub temperature_end: f64,
    /// Likelihood-only epochs before the first task.
    pub warm_start_epochs: usize,
    pub epochs: usize,
    pub finetune_epochs: usize,
    pub coreset_epochs: usize,
    pub batch_size: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    pub coreset_method: CoresetMethod,
    pub coreset_size: usize,
    /// Reserve `T` of trailing empty columns kept by dynamic expansion.
    pub expansion_reserve: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Npbcl,
            seed: 1,
            init: LayerInit::default(),
            sigma0: 0.6,
            lr_structure: 0.01,
            lr_gaussian: 0.001,
            lr_finetune: 0.0001,
            lr_coreset: 0.001,
            temperature_start: 10.0,
            temperature_end: 0.25,
            warm_start_epochs: 1,
            epochs: 5,
            finetune_epochs: 5,
            coreset_epochs: 5,
            batch_size: 32,
            train_samples: 10,
            test_samples: 100,
            coreset_method: CoresetMethod::Random,
            coreset_size: 0,
            expansion_reserve: None,
        }
    }
}

impl TrainConfig {
    /// Geometric schedule from `temperature_start` to `temperature_end` over the masked epochs.
    pub fn temperature(&self, epoch: usize) -> f64 {
        if self.epochs <= 1 {
            return self.temperature_start;
        }
        let frac = epoch as f64 / (self.epochs - 1) as f64;
        self.temperature_start * (self.temperature_end / self.temperature_start).powf(frac)
    }
}

/// Everything that persists between tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClState<M> {
    pub model: M,
    pub priors: PriorStore,
    pub masks: Vec<TaskMask>,
    pub coresets: Vec<Dataset>,
    pub optimizer: Adam,
    pub next_task: usize,
}

/// Summary of one `train_task` call.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskReport {
    pub task: usize,
    /// Mean loss of the last masked-training epoch.
    pub final_loss: f64,
    /// Columns added per layer by dynamic expansion.
    pub expanded: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PhaseKind {
    WarmStart,
    Masked,
    Finetune,
    Coreset,
}

impl PhaseKind {
    fn name(self) -> &'static str {
        match self {
            PhaseKind::WarmStart => "warm start",
            PhaseKind::Masked => "masked training",
            PhaseKind::Finetune => "finetune",
            PhaseKind::Coreset => "coreset pass",
        }
    }

    fn salt(self) -> u64 {
        match self {
            PhaseKind::WarmStart => 1,
            PhaseKind::Masked => 2,
            PhaseKind::Finetune => 3,
            PhaseKind::Coreset => 4,
        }
    }
}

struct Phase<'a> {
    kind: PhaseKind,
    epochs: usize,
    /// Stochastic masks with the annealed temperature.
    stochastic: bool,
    frozen: Option<&'a [Tensor]>,
    sample_weights: bool,
    with_kl: bool,
    train: Trainable,
    lr_gaussian: f64,
    lr_structure: f64,
    update_mask: Option<&'a TaskMask>,
}

/// Per-entry update mask for `id` under a frozen task mask.
fn update_mask_for(id: ParamId, mask: &TaskMask) -> Option<Tensor> {
    match id {
        ParamId::Ibp {
            layer,
            field: IbpField::WeightMean | IbpField::WeightRawSigma,
        } => Some(mask.layers[layer].clone()),
        ParamId::Ibp {
            layer,
            field: IbpField::BiasMean | IbpField::BiasRawSigma,
        } => Some(used_columns(&mask.layers[layer])),
        _ => None,
    }
}

fn dense_mask<M: ClModel>(model: &M) -> TaskMask {
    TaskMask {
        layers: model
            .ibp_layers()
            .iter()
            .map(|l| Tensor::full(&[l.input_dim(), l.truncation()], 1.0))
            .collect(),
    }
}

struct PhaseRun<'a, M> {
    model: &'a mut M,
    priors: &'a mut PriorStore,
    optimizer: &'a mut Adam,
    cfg: &'a TrainConfig,
    task: usize,
    /// Salt distinguishing repeated phases of the same kind within one task.
    stream_task: usize,
}

impl<M: ClModel> PhaseRun<'_, M> {
    /// Runs `phase` on `data`; `after_epoch` may grow the model between epochs.
    fn run(
        &mut self,
        data: &Dataset,
        phase: &Phase<'_>,
        mut after_epoch: impl FnMut(&mut M, &mut PriorStore, &mut Adam, usize),
    ) -> Result<f64> {
        let cfg = self.cfg;
        let salt = phase.kind.salt();
        let mut mask_rng = rng::stream(cfg.seed, Purpose::MaskNoise, self.stream_task, salt);
        let mut weight_rng = rng::stream(cfg.seed, Purpose::WeightNoise, self.stream_task, salt);
        let numeric = |e: NetError| ClError::Numeric {
            task: self.task,
            phase: phase.kind.name(),
            source: e,
        };
        let n = data.len();
        let batch = cfg.batch_size.max(1);
        let mut last_epoch_loss = f64::NAN;
        for epoch in 0..phase.epochs {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng::stream(
                cfg.seed,
                Purpose::DataOrder,
                self.stream_task,
                salt * 1000 + epoch as u64,
            ));
            let temperature = cfg.temperature(epoch);
            let pass = if phase.stochastic {
                Pass::Stochastic { temperature }
            } else if let Some(m) = phase.frozen {
                Pass::Frozen(m)
            } else {
                Pass::Dense
            };
            let mut epoch_loss = 0.0;
            let mut batches = 0usize;
            for chunk in order.chunks(batch) {
                let b = data.select(chunk);
                let noise = self
                    .model
                    .draw_noise(
                        self.task,
                        b.len(),
                        phase.stochastic,
                        phase.sample_weights,
                        cfg.train_samples,
                        &mut mask_rng,
                        &mut weight_rng,
                    )
                    .map_err(numeric)?;
                let obj = Objective {
                    pass,
                    with_kl: phase.with_kl,
                    data_scale: n as f64 / b.len() as f64,
                };
                let mut g = Graph::new();
                let (terms, binding) = self
                    .model
                    .objective(&mut g, self.task, &b, self.priors, &obj, &noise, phase.train)
                    .map_err(numeric)?;
                let grads = g.backward(terms.loss).map_err(|e| numeric(e.into()))?;
                epoch_loss += g.value(terms.loss).item();
                batches += 1;
                for (id, var) in binding.params {
                    let grad = grads.get_or_zeros(var, g.shape(var));
                    let lr = match id.group() {
                        ParamGroup::Gaussian => phase.lr_gaussian,
                        ParamGroup::Structure => phase.lr_structure,
                    };
                    let mask = phase.update_mask.and_then(|m| update_mask_for(id, m));
                    let param = self.model.param_mut(id)?;
                    self.optimizer.step(&id.to_string(), param, &grad, lr, mask.as_ref());
                }
            }
            last_epoch_loss = epoch_loss / batches.max(1) as f64;
            if !last_epoch_loss.is_finite() {
                return Err(ClError::Numeric {
                    task: self.task,
                    phase: phase.kind.name(),
                    source: NetError::Dist(crate::dist::DistError::Autodiff(
                        crate::autodiff::AutodiffError::NonFinite { op: "loss" },
                    )),
                });
            }
            after_epoch(self.model, self.priors, self.optimizer, epoch);
        }
        Ok(last_epoch_loss)
    }
}

impl<M: ClModel> ClState<M> {
    /// Fresh state with `p₀` priors.
    pub fn new(model: M, cfg: &TrainConfig) -> Self {
        let priors = PriorStore::initial(model.ibp_layers(), model.shared_dense(), cfg.sigma0, cfg.init.alpha);
        Self {
            model,
            priors,
            masks: Vec::new(),
            coresets: Vec::new(),
            optimizer: Adam::new(),
            next_task: 0,
        }
    }

    /// Trains the next task of the stream.
    pub fn train_task(&mut self, task: &Task, cfg: &TrainConfig) -> Result<TaskReport> {
        let t = self.next_task;
        if task.train.is_empty() {
            return Err(ClError::EmptyTask(t));
        }
        let mut init_rng = rng::stream(cfg.seed, Purpose::Init, t, 1);
        self.model
            .begin_task(t, task.classes, &cfg.init, &mut init_rng, &mut self.priors);

        // coreset C_t and remainder D_t \ C_t
        let (chosen, rest) = coreset_select(
            &task.train,
            cfg.coreset_method,
            cfg.coreset_size,
            &mut rng::stream(cfg.seed, Purpose::Coreset, t, 0),
        )?;
        let data = task.train.select(&rest);
        if data.is_empty() {
            return Err(ClError::EmptyTask(t));
        }
        self.coresets.push(task.train.select(&chosen));

        let mode = cfg.mode;
        let bayes = mode != Mode::Naive;
        let mut run = PhaseRun {
            model: &mut self.model,
            priors: &mut self.priors,
            optimizer: &mut self.optimizer,
            cfg,
            task: t,
            stream_task: t,
        };

        if t == 0 && cfg.warm_start_epochs > 0 {
            run.optimizer.reset();
            let warm = Phase {
                kind: PhaseKind::WarmStart,
                epochs: cfg.warm_start_epochs,
                stochastic: false,
                frozen: None,
                sample_weights: false,
                with_kl: false,
                train: Trainable::GAUSSIAN,
                lr_gaussian: cfg.lr_gaussian,
                lr_structure: cfg.lr_structure,
                update_mask: None,
            };
            run.run(&data, &warm, |_, _, _, _| {})?;
        }

        run.optimizer.reset();
        let masked = Phase {
            kind: PhaseKind::Masked,
            epochs: cfg.epochs,
            stochastic: mode == Mode::Npbcl,
            frozen: None,
            sample_weights: bayes,
            with_kl: bayes,
            train: if mode == Mode::Npbcl {
                Trainable::ALL
            } else {
                Trainable::GAUSSIAN
            },
            lr_gaussian: cfg.lr_gaussian,
            lr_structure: cfg.lr_structure,
            update_mask: None,
        };
        let reserve = cfg.expansion_reserve.filter(|_| mode == Mode::Npbcl);
        let mut expanded = vec![0usize; run.model.ibp_layers().len()];
        let previous: Vec<TaskMask> = self.masks.clone();
        let final_loss = run.run(&data, &masked, |model, priors, optimizer, epoch| {
            let Some(reserve) = reserve else { return };
            let mut grow_rng = rng::stream(cfg.seed, Purpose::Init, t, 100 + epoch as u64);
            for l in 0..model.ibp_layers().len() {
                let current = model.ibp_layers()[l].hardened_mask();
                let mut all: Vec<&Tensor> = previous.iter().map(|m| &m.layers[l]).collect();
                all.push(&current);
                let union = union_masks(&all).expect("at least the current mask");
                let (_, grow) = ibp::expansion_count(&union, reserve);
                if grow == 0 {
                    continue;
                }
                model.ibp_layers_mut()[l].append_columns(grow, &cfg.init, &mut grow_rng);
                let layer = &model.ibp_layers()[l];
                priors.pad_layer(l, layer.input_dim(), layer.truncation());
                model.grow_consumers(l, grow, &cfg.init, &mut grow_rng, priors);
                optimizer.reset();
                expanded[l] += grow;
            }
        })?;
        if expanded.iter().any(|&g| g > 0) {
            self.pad_stored_masks();
        }

        // harden B_t
        let mask = match mode {
            Mode::Npbcl => TaskMask {
                layers: self.model.ibp_layers().iter().map(|l| l.hardened_mask()).collect(),
            },
            Mode::Vcl | Mode::Naive => dense_mask(&self.model),
        };
        self.masks.push(mask);

        // selective finetuning of the Gaussian parameters under B_t
        let mask_ref = self.masks.last().expect("just pushed").clone();
        let mut run = PhaseRun {
            model: &mut self.model,
            priors: &mut self.priors,
            optimizer: &mut self.optimizer,
            cfg,
            task: t,
            stream_task: t,
        };
        run.optimizer.reset();
        let finetune = Phase {
            kind: PhaseKind::Finetune,
            epochs: cfg.finetune_epochs,
            stochastic: false,
            frozen: (mode == Mode::Npbcl).then_some(mask_ref.layers.as_slice()),
            sample_weights: bayes,
            with_kl: bayes,
            train: Trainable::GAUSSIAN,
            lr_gaussian: cfg.lr_finetune,
            lr_structure: 0.0,
            update_mask: (mode == Mode::Npbcl).then_some(&mask_ref),
        };
        run.run(&data, &finetune, |_, _, _, _| {})?;

        if bayes {
            for layer in self.model.ibp_layers_mut() {
                layer.alpha = alpha_update(layer);
            }
            let refs: Vec<Vec<&Tensor>> = (0..self.model.ibp_layers().len())
                .map(|l| self.masks.iter().map(|m| &m.layers[l]).collect())
                .collect();
            let union: Vec<Tensor> = refs
                .iter()
                .map(|ms| union_masks(ms).expect("at least one task"))
                .collect();
            self.priors.layers = masked_prior_update(self.model.ibp_layers(), &union, cfg.sigma0);
            self.priors.dense = self.model.shared_dense().iter().map(DensePrior::from_posterior).collect();
        }
        self.next_task += 1;
        Ok(TaskReport {
            task: t,
            final_loss,
            expanded,
        })
    }

    fn pad_stored_masks(&mut self) {
        let shapes: Vec<(usize, usize)> = self
            .model
            .ibp_layers()
            .iter()
            .map(|l| (l.input_dim(), l.truncation()))
            .collect();
        for m in &mut self.masks {
            for (t, &(r, c)) in m.layers.iter_mut().zip(&shapes) {
                if t.shape() != [r, c] {
                    *t = ibp::pad_mask(t, r, c);
                }
            }
        }
    }

    /// Clone refined on the stored coresets with the current posterior as
    /// prior; each task's examples update only the weights its mask uses.
    /// Without coreset data this is a plain clone.
    pub fn prediction_model(&self, cfg: &TrainConfig) -> Result<M> {
        let mut model = self.model.clone();
        if self.coresets.iter().all(Dataset::is_empty) || cfg.coreset_epochs == 0 {
            return Ok(model);
        }
        let mode = cfg.mode;
        let bayes = mode != Mode::Naive;
        let mut priors = PriorStore::from_posterior(
            model.ibp_layers(),
            model.shared_dense(),
            model.heads(),
            cfg.sigma0,
        );
        let mut optimizer = Adam::new();
        let after = self.next_task.saturating_sub(1);
        for (s, core) in self.coresets.iter().enumerate() {
            if core.is_empty() {
                continue;
            }
            let mask = &self.masks[s];
            let phase = Phase {
                kind: PhaseKind::Coreset,
                epochs: cfg.coreset_epochs,
                stochastic: false,
                frozen: (mode == Mode::Npbcl).then_some(mask.layers.as_slice()),
                sample_weights: bayes,
                with_kl: bayes,
                train: Trainable::GAUSSIAN,
                lr_gaussian: cfg.lr_coreset,
                lr_structure: 0.0,
                update_mask: (mode == Mode::Npbcl).then_some(mask),
            };
            optimizer.reset();
            let mut run = PhaseRun {
                model: &mut model,
                priors: &mut priors,
                optimizer: &mut optimizer,
                cfg,
                task: s,
                stream_task: 10_000 * (after + 1) + s,
            };
            run.run(core, &phase, |_, _, _, _| {})?;
        }
        Ok(model)
    }

    /// Scores `model` on the test split of task `j`.
    pub fn evaluate_task(&self, model: &M, j: usize, test: &Dataset, cfg: &TrainConfig) -> Result<f64> {
        let after = self.next_task.saturating_sub(1);
        let mut eval_rng = rng::stream(cfg.seed, Purpose::Eval, after, j as u64);
        let (pass, samples) = match cfg.mode {
            Mode::Npbcl => (Pass::Frozen(&self.masks[j].layers), cfg.test_samples),
            Mode::Vcl => (Pass::Dense, cfg.test_samples),
            Mode::Naive => (Pass::Dense, 0),
        };
        Ok(model.evaluate(j, test, pass, samples, &mut eval_rng)?)
    }
}

/// Trains every remaining task of `stream`, filling row `i` of `r` after task `i`.
/// `hook` runs after each task's row is complete.
pub fn run_stream<M: ClModel, E>(
    state: &mut ClState<M>,
    stream: &TaskStream,
    cfg: &TrainConfig,
    r: &mut ResultMatrix,
    mut hook: impl FnMut(&ClState<M>, usize, &[f64]) -> std::result::Result<(), E>,
) -> std::result::Result<(), E>
where
    E: From<ClError>,
{
    while state.next_task < stream.len() {
        let t = state.next_task;
        state.train_task(&stream.tasks[t], cfg)?;
        let pred = state.prediction_model(cfg)?;
        let mut row = Vec::with_capacity(t + 1);
        for j in 0..=t {
            let v = state.evaluate_task(&pred, j, &stream.tasks[j].test, cfg)?;
            r.set(t, j, v);
            row.push(v);
        }
        hook(state, t, &row)?;
    }
    Ok(())
}

/// Runs one learner over the whole stream from a fresh model.
pub fn run_baseline<M: ClModel>(mode: Mode, model: M, stream: &TaskStream, cfg: &TrainConfig) -> Result<ResultMatrix> {
    let cfg = TrainConfig {
        mode,
        ..cfg.clone()
    };
    let mut state = ClState::new(model, &cfg);
    let mut r = ResultMatrix::new(stream.len());
    run_stream(&mut state, stream, &cfg, &mut r, |_, _, _| Ok::<(), ClError>(()))?;
    Ok(r)
}
