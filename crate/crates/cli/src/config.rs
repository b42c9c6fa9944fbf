//! Experiment configuration in TOML.
//!
//! Every key is optional; an empty file gives the desk-scale split-digits
//! run with the reference hyperparameters. Unknown keys are rejected.
//!
//! ```toml
//! mode = "npbcl"          # npbcl | vcl | naive
//! problem = "supervised"  # supervised | vae
//! seed = 1
//! alpha = 30.0
//! output_dir = "runs/split-digits"
//!
//! [architecture]
//! hidden = [64]
//!
//! [stream]
//! source = "idx"
//! train_images = "data/digits/train-images.idx"
//! # ...
//! [stream.tasks]
//! kind = "split"
//! groups = [[0, 1], [2, 3], [4, 5], [6, 7], [8, 9]]
//! ```

use std::path::{Path, PathBuf};

use ibpcl_core::cl::{CoresetMethod, Mode, TrainConfig};
use ibpcl_core::data::Synthetic;
use ibpcl_core::ibp::LayerInit;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{0}")]
    Parse(#[from] toml::de::Error),
    #[error("{}{field} = {value}: {expected}", line.map_or(String::new(), |l| format!("line {l}: ")))]
    Range {
        field: String,
        value: String,
        expected: &'static str,
        line: Option<usize>,
    },
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Problem {
    Supervised,
    Vae,
}

/// How a dataset is cut into tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum TaskSplit {
    /// One task per class group.
    Split { groups: Vec<Vec<usize>> },
    /// The same classes under a fresh pixel permutation per task.
    Permuted { tasks: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase", deny_unknown_fields)]
pub enum StreamSpec {
    /// IDX image/label files. Relative paths resolve against the working directory.
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        train_per_class: Option<usize>,
        test_per_class: Option<usize>,
        /// Output side of the block-mean downsampling.
        downsample: Option<usize>,
        tasks: TaskSplit,
    },
    /// Generated data; `test_per_class` examples of each class are held out.
    Synthetic {
        generator: Synthetic,
        test_per_class: usize,
        tasks: TaskSplit,
    },
}

impl Default for StreamSpec {
    fn default() -> Self {
        let dir = Path::new("data/digits");
        StreamSpec::Idx {
            train_images: dir.join("train-images.idx"),
            train_labels: dir.join("train-labels.idx"),
            test_images: dir.join("test-images.idx"),
            test_labels: dir.join("test-labels.idx"),
            train_per_class: Some(500),
            test_per_class: Some(200),
            downsample: Some(8),
            tasks: TaskSplit::Split {
                groups: (0..5).map(|i| vec![2 * i, 2 * i + 1]).collect(),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Architecture {
    /// Hidden widths of the supervised trunk.
    pub hidden: Vec<usize>,
    pub encoder: Vec<usize>,
    pub latent: usize,
    pub decoder: Vec<usize>,
    /// Keep this many trailing empty columns per layer by growing it.
    pub expansion_reserve: Option<usize>,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            hidden: vec![64],
            encoder: vec![32, 32],
            latent: 8,
            decoder: vec![32, 32],
            expansion_reserve: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub problem: Problem,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub alpha: f64,
    pub sigma0: f64,
    pub init_mean_std: f64,
    pub init_sigma: f64,
    pub lr_structure: f64,
    pub lr_gaussian: f64,
    pub lr_finetune: f64,
    pub lr_coreset: f64,
    pub temperature_start: f64,
    pub temperature_end: f64,
    pub warm_start_epochs: usize,
    pub epochs: usize,
    pub finetune_epochs: usize,
    pub coreset_epochs: usize,
    pub batch_size: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    pub coreset_method: CoresetMethod,
    pub coreset_size: usize,
    /// Samples per task row of the VAE generation grids.
    pub grid_samples: usize,
    pub architecture: Architecture,
    pub stream: StreamSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            mode: t.mode,
            problem: Problem::Supervised,
            seed: t.seed,
            output_dir: PathBuf::from("runs/default"),
            alpha: t.init.alpha,
            sigma0: t.sigma0,
            init_mean_std: t.init.mean_std,
            init_sigma: t.init.sigma,
            lr_structure: t.lr_structure,
            lr_gaussian: t.lr_gaussian,
            lr_finetune: t.lr_finetune,
            lr_coreset: t.lr_coreset,
            temperature_start: t.temperature_start,
            temperature_end: t.temperature_end,
            warm_start_epochs: t.warm_start_epochs,
            epochs: t.epochs,
            finetune_epochs: t.finetune_epochs,
            coreset_epochs: t.coreset_epochs,
            batch_size: t.batch_size,
            train_samples: t.train_samples,
            test_samples: t.test_samples,
            coreset_method: t.coreset_method,
            coreset_size: t.coreset_size,
            grid_samples: 8,
            architecture: Architecture::default(),
            stream: StreamSpec::default(),
        }
    }
}

/// Line of `key = ...` inside table `table` (empty for the root table), 1-based.
fn key_line(text: &str, table: &str, key: &str) -> Option<usize> {
    let mut current = String::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if let Some(header) = line.strip_prefix('[') {
            current = header.trim_end_matches(']').trim().to_string();
            continue;
        }
        let Some((k, _)) = line.split_once('=') else {
            continue;
        };
        if current == table && k.trim().trim_matches('"') == key {
            return Some(i + 1);
        }
    }
    None
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate().map_err(|mut e| {
            if let ConfigError::Range { field, line, .. } = &mut e {
                let (table, key) = field.rsplit_once('.').unwrap_or(("", field));
                *line = key_line(text, table, key);
            }
            e
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    /// The fully resolved config, re-parseable to an equal value.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        fn range(field: &str, value: impl ToString, expected: &'static str) -> ConfigError {
            ConfigError::Range {
                field: field.to_string(),
                value: value.to_string(),
                expected,
                line: None,
            }
        }
        let positive = [
            ("alpha", self.alpha),
            ("sigma0", self.sigma0),
            ("init_sigma", self.init_sigma),
            ("lr_structure", self.lr_structure),
            ("lr_gaussian", self.lr_gaussian),
            ("lr_finetune", self.lr_finetune),
            ("lr_coreset", self.lr_coreset),
            ("temperature_start", self.temperature_start),
            ("temperature_end", self.temperature_end),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(range(name, v, "must be finite and > 0"));
            }
        }
        if !(self.init_mean_std.is_finite() && self.init_mean_std >= 0.0) {
            return Err(range("init_mean_std", self.init_mean_std, "must be finite and >= 0"));
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("train_samples", self.train_samples),
            ("test_samples", self.test_samples),
            ("epochs", self.epochs),
        ] {
            if v == 0 {
                return Err(range(name, v, "must be >= 1"));
            }
        }
        let a = &self.architecture;
        let widths: Vec<(&str, &[usize])> = match self.problem {
            Problem::Supervised => vec![("architecture.hidden", &a.hidden)],
            Problem::Vae => vec![("architecture.encoder", &a.encoder), ("architecture.decoder", &a.decoder)],
        };
        for (name, w) in widths {
            if w.is_empty() || w.contains(&0) {
                return Err(range(name, format!("{w:?}"), "needs at least one layer, all widths >= 1"));
            }
        }
        if self.problem == Problem::Vae && a.latent == 0 {
            return Err(range("architecture.latent", a.latent, "must be >= 1"));
        }
        if self.mode != Mode::Npbcl && a.expansion_reserve.is_some() {
            return Err(range(
                "architecture.expansion_reserve",
                a.expansion_reserve.unwrap_or(0),
                "dynamic expansion needs mode = \"npbcl\"",
            ));
        }
        let tasks = match &self.stream {
            StreamSpec::Idx { tasks, downsample, .. } => {
                if *downsample == Some(0) {
                    return Err(range("stream.downsample", 0, "must be >= 1"));
                }
                tasks
            }
            StreamSpec::Synthetic { tasks, .. } => tasks,
        };
        match tasks {
            TaskSplit::Split { groups } if groups.is_empty() || groups.iter().any(Vec::is_empty) => {
                Err(range("stream.tasks.groups", format!("{groups:?}"), "needs at least one non-empty group"))
            }
            TaskSplit::Permuted { tasks: 0 } => Err(range("stream.tasks.tasks", 0, "must be >= 1")),
            _ => Ok(()),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            mode: self.mode,
            seed: self.seed,
            init: LayerInit {
                mean_std: self.init_mean_std,
                sigma: self.init_sigma,
                alpha: self.alpha,
            },
            sigma0: self.sigma0,
            lr_structure: self.lr_structure,
            lr_gaussian: self.lr_gaussian,
            lr_finetune: self.lr_finetune,
            lr_coreset: self.lr_coreset,
            temperature_start: self.temperature_start,
            temperature_end: self.temperature_end,
            warm_start_epochs: self.warm_start_epochs,
            epochs: self.epochs,
            finetune_epochs: self.finetune_epochs,
            coreset_epochs: self.coreset_epochs,
            batch_size: self.batch_size,
            train_samples: self.train_samples,
            test_samples: self.test_samples,
            coreset_method: self.coreset_method,
            coreset_size: self.coreset_size,
            expansion_reserve: self.architecture.expansion_reserve,
        }
    }
}
