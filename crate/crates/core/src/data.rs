//! Dataset ingestion (IDX), task streams and synthetic generators.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{self, Purpose};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad IDX magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported IDX dtype 0x{0:02x} (only 0x08 unsigned byte)")]
    UnsupportedDtype(u8),
    #[error("truncated IDX file: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("IDX payload too long: expected {expected} bytes, found {actual}")]
    TrailingBytes { expected: usize, actual: usize },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("class {0} not present")]
    MissingClass(usize),
    #[error("class {0} used by more than one task")]
    OverlappingClasses(usize),
    #[error("label {label} out of range for {classes} classes")]
    BadLabel { label: usize, classes: usize },
    #[error("input value {0} outside [0, 1]")]
    InputRange(f64),
    #[error("invalid parameter {name}: {value}")]
    InvalidParam { name: &'static str, value: f64 },
    #[error("image side {0} cannot be block-averaged")]
    BadImageSide(usize),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Raw unsigned-byte IDX array.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

impl IdxArray {
    /// Parses the big-endian IDX layout: `00 00 08 ndim`, `ndim` u32 extents, payload.
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(DataError::Truncated {
                expected: 4,
                actual: bytes.len(),
            });
        }
        let magic = [bytes[0], bytes[1], bytes[2], bytes[3]];
        if magic[0] != 0 || magic[1] != 0 {
            return Err(DataError::BadMagic(magic));
        }
        if magic[2] != 0x08 {
            return Err(DataError::UnsupportedDtype(magic[2]));
        }
        let ndim = magic[3] as usize;
        let header = 4 + 4 * ndim;
        if bytes.len() < header {
            return Err(DataError::Truncated {
                expected: header,
                actual: bytes.len(),
            });
        }
        let dims: Vec<usize> = (0..ndim)
            .map(|i| {
                let o = 4 + 4 * i;
                u32::from_be_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize
            })
            .collect();
        let expected = header + dims.iter().product::<usize>();
        match bytes.len().cmp(&expected) {
            std::cmp::Ordering::Less => Err(DataError::Truncated {
                expected,
                actual: bytes.len(),
            }),
            std::cmp::Ordering::Greater => Err(DataError::TrailingBytes {
                expected,
                actual: bytes.len(),
            }),
            std::cmp::Ordering::Equal => Ok(Self {
                dims,
                data: bytes[header..].to_vec(),
            }),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = vec![0, 0, 0x08, self.dims.len() as u8];
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_be_bytes());
        }
        out.extend_from_slice(&self.data);
        out
    }

    /// Payload rescaled to `[0, 1]` by `/255`.
    pub fn scaled(&self) -> Vec<f64> {
        self.data.iter().map(|&b| b as f64 / 255.0).collect()
    }
}

pub fn read_idx(path: impl AsRef<Path>) -> Result<IdxArray> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    IdxArray::parse(&bytes)
}

pub fn write_idx(path: impl AsRef<Path>, array: &IdxArray) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, array.to_bytes()).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Labelled examples with inputs in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(DataError::CountMismatch {
                images: inputs.rows(),
                labels: labels.len(),
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(DataError::BadLabel { label, classes });
        }
        if let Some(&v) = inputs.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(DataError::InputRange(v));
        }
        Ok(Self {
            inputs,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            inputs: self.inputs.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }

    /// Keeps the first `cap` examples of every class, in original order.
    pub fn cap_per_class(&self, cap: usize) -> Self {
        let mut seen = vec![0usize; self.classes];
        let idx: Vec<usize> = (0..self.len())
            .filter(|&i| {
                let c = &mut seen[self.labels[i]];
                *c += 1;
                *c <= cap
            })
            .collect();
        self.select(&idx)
    }

    /// Splits off the first `per_class` examples of each class as a held-out set.
    /// Returns `(remainder, held_out)`.
    pub fn hold_out(&self, per_class: usize) -> (Self, Self) {
        let mut seen = vec![0usize; self.classes];
        let (mut keep, mut out) = (Vec::new(), Vec::new());
        for i in 0..self.len() {
            let c = &mut seen[self.labels[i]];
            *c += 1;
            if *c <= per_class {
                out.push(i);
            } else {
                keep.push(i);
            }
        }
        (self.select(&keep), self.select(&out))
    }
}

/// Loads an image file and a label file (both IDX) into a [`Dataset`].
pub fn load_idx_pair(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset> {
    let img = read_idx(images)?;
    let lab = read_idx(labels)?;
    let n = img.dims.first().copied().unwrap_or(0);
    if n != lab.data.len() {
        return Err(DataError::CountMismatch {
            images: n,
            labels: lab.data.len(),
        });
    }
    let d = if n == 0 { 0 } else { img.data.len() / n };
    let inputs = Tensor::new(vec![n, d], img.scaled()).expect("consistent IDX extents");
    let labels: Vec<usize> = lab.data.iter().map(|&b| b as usize).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::new(inputs, labels, classes)
}

/// Block boundaries partitioning `side` pixels into `out` blocks: `floor(i · side / out)`.
fn block_edges(side: usize, out: usize) -> Vec<usize> {
    (0..=out).map(|i| i * side / out).collect()
}

/// Block-mean downsampling of square `side × side` images to `out × out`.
/// For 28 → 8 the blocks alternate 3 and 4 pixels wide.
pub fn downsample(data: &Dataset, out: usize) -> Result<Dataset> {
    let side = (data.dim() as f64).sqrt().round() as usize;
    if side * side != data.dim() || out == 0 || out > side {
        return Err(DataError::BadImageSide(side));
    }
    let edges = block_edges(side, out);
    let n = data.len();
    let inputs = Tensor::from_fn(n, out * out, |r, c| {
        let (bi, bj) = (c / out, c % out);
        let mut acc = 0.0;
        let mut count = 0usize;
        for y in edges[bi]..edges[bi + 1] {
            for x in edges[bj]..edges[bj + 1] {
                acc += data.inputs.get(r, y * side + x);
                count += 1;
            }
        }
        acc / count as f64
    });
    Dataset::new(inputs, data.labels.clone(), data.classes)
}

/// One task of a stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub train: Dataset,
    pub test: Dataset,
    /// Head width.
    pub classes: usize,
    /// `class_map[local]` is the original class id.
    pub class_map: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskStream {
    pub tasks: Vec<Task>,
}

impl TaskStream {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }
}

fn restrict(data: &Dataset, group: &[usize]) -> Dataset {
    let idx: Vec<usize> = (0..data.len()).filter(|&i| group.contains(&data.labels[i])).collect();
    let mut out = data.select(&idx);
    for l in &mut out.labels {
        *l = group.iter().position(|c| c == l).expect("filtered");
    }
    out.classes = group.len();
    out
}

/// One task per class group, labels re-indexed to the position within the group.
/// Split benchmarks use pairs, single-class groups give per-class VAE tasks.
pub fn make_split_stream(train: &Dataset, test: &Dataset, groups: &[Vec<usize>]) -> Result<TaskStream> {
    let mut used = std::collections::BTreeSet::new();
    for &c in groups.iter().flatten() {
        if !used.insert(c) {
            return Err(DataError::OverlappingClasses(c));
        }
        if !train.labels.contains(&c) || !test.labels.contains(&c) {
            return Err(DataError::MissingClass(c));
        }
    }
    let tasks = groups
        .iter()
        .map(|g| Task {
            train: restrict(train, g),
            test: restrict(test, g),
            classes: g.len(),
            class_map: g.clone(),
        })
        .collect();
    Ok(TaskStream { tasks })
}

/// Seeded pixel permutation of `0..d`; task 0 is the identity.
pub fn task_permutation(d: usize, task: usize, seed: u64) -> Vec<usize> {
    let mut p: Vec<usize> = (0..d).collect();
    if task > 0 {
        p.shuffle(&mut rng::stream(seed, Purpose::DataOrder, task, 0x9e));
    }
    p
}

fn permute(data: &Dataset, perm: &[usize]) -> Dataset {
    let inputs = Tensor::from_fn(data.len(), data.dim(), |r, c| data.inputs.get(r, perm[c]));
    Dataset {
        inputs,
        labels: data.labels.clone(),
        classes: data.classes,
    }
}

/// `tasks` full-multiclass tasks with fixed pixel permutations.
pub fn make_permuted_stream(train: &Dataset, test: &Dataset, tasks: usize, seed: u64) -> Result<TaskStream> {
    if tasks == 0 {
        return Err(DataError::InvalidParam {
            name: "tasks",
            value: 0.0,
        });
    }
    let tasks = (0..tasks)
        .map(|t| {
            let perm = task_permutation(train.dim(), t, seed);
            Task {
                train: permute(train, &perm),
                test: permute(test, &perm),
                classes: train.classes,
                class_map: (0..train.classes).collect(),
            }
        })
        .collect();
    Ok(TaskStream { tasks })
}

/// Desk-scale synthetic generators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Synthetic {
    /// Isotropic Gaussian class blobs; class means lie `separation` σ apart
    /// along distinct random directions.
    GaussBlobs {
        classes: usize,
        dim: usize,
        per_class: usize,
        separation: f64,
    },
    /// Two interleaved half-circles in 2-D.
    TwoMoons { per_class: usize, noise: f64 },
    /// 8×8 images: blurred class prototypes plus pixel noise, clipped to `[0, 1]`.
    ClusterImages {
        classes: usize,
        per_class: usize,
        noise: f64,
    },
}

/// Side of the synthetic cluster images.
pub const CLUSTER_SIDE: usize = 8;

pub fn make_synthetic(kind: &Synthetic, seed: u64) -> Result<Dataset> {
    let mut rng = rng::stream(seed, Purpose::DataOrder, usize::MAX, 0x5e);
    let positive = |name, v: f64| {
        if v > 0.0 {
            Ok(())
        } else {
            Err(DataError::InvalidParam { name, value: v })
        }
    };
    match *kind {
        Synthetic::GaussBlobs {
            classes,
            dim,
            per_class,
            separation,
        } => {
            positive("classes", classes as f64)?;
            positive("dim", dim as f64)?;
            positive("per_class", per_class as f64)?;
            positive("separation", separation)?;
            let centers: Vec<Vec<f64>> = (0..classes)
                .map(|_| {
                    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                    // distinct unit directions at radius s/√2 are ≈ s apart
                    v.iter().map(|x| x / norm * separation / std::f64::consts::SQRT_2).collect()
                })
                .collect();
            let (raw, labels) = interleave(classes, per_class, dim, |c, rng| {
                centers[c]
                    .iter()
                    .map(|m| m + Distribution::<f64>::sample(&StandardNormal, rng))
                    .collect()
            }, &mut rng);
            Dataset::new(min_max(raw), labels, classes)
        }
        Synthetic::TwoMoons { per_class, noise } => {
            positive("per_class", per_class as f64)?;
            positive("noise", noise)?;
            let normal = Normal::new(0.0, noise).expect("positive noise");
            let (raw, labels) = interleave(2, per_class, 2, |c, rng| {
                let t = rng.random::<f64>() * std::f64::consts::PI;
                let (x, y) = if c == 0 {
                    (t.cos(), t.sin())
                } else {
                    (1.0 - t.cos(), 0.5 - t.sin())
                };
                vec![x + normal.sample(rng), y + normal.sample(rng)]
            }, &mut rng);
            Dataset::new(min_max(raw), labels, 2)
        }
        Synthetic::ClusterImages {
            classes,
            per_class,
            noise,
        } => {
            positive("classes", classes as f64)?;
            positive("per_class", per_class as f64)?;
            positive("noise", noise)?;
            let side = CLUSTER_SIDE;
            let protos: Vec<Vec<f64>> = (0..classes).map(|_| prototype(side, &mut rng)).collect();
            let normal = Normal::new(0.0, noise).expect("positive noise");
            let (raw, labels) = interleave(classes, per_class, side * side, |c, rng| {
                protos[c]
                    .iter()
                    .map(|p| (p + normal.sample(rng)).clamp(0.0, 1.0))
                    .collect()
            }, &mut rng);
            Dataset::new(raw, labels, classes)
        }
    }
}

/// Class-interleaved generation: example `i` has class `i mod classes`.
fn interleave<R: Rng>(
    classes: usize,
    per_class: usize,
    dim: usize,
    mut sample: impl FnMut(usize, &mut R) -> Vec<f64>,
    rng: &mut R,
) -> (Tensor, Vec<usize>) {
    let n = classes * per_class;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        data.extend(sample(c, rng));
        labels.push(c);
    }
    (Tensor::new(vec![n, dim], data).expect("consistent"), labels)
}

/// Per-feature affine rescale to `[0, 1]`.
fn min_max(t: Tensor) -> Tensor {
    let (n, d) = (t.rows(), t.cols());
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for r in 0..n {
        for c in 0..d {
            lo[c] = lo[c].min(t.get(r, c));
            hi[c] = hi[c].max(t.get(r, c));
        }
    }
    Tensor::from_fn(n, d, |r, c| {
        let span = hi[c] - lo[c];
        if span > 0.0 {
            ((t.get(r, c) - lo[c]) / span).clamp(0.0, 1.0)
        } else {
            0.5
        }
    })
}

/// Three Gaussian bumps at random positions, blurred and scaled to peak 1.
fn prototype(side: usize, rng: &mut impl Rng) -> Vec<f64> {
    let bumps: Vec<(f64, f64)> = (0..3)
        .map(|_| (rng.random_range(0.0..side as f64), rng.random_range(0.0..side as f64)))
        .collect();
    let mut img: Vec<f64> = (0..side * side)
        .map(|i| {
            let (y, x) = ((i / side) as f64 + 0.5, (i % side) as f64 + 0.5);
            bumps
                .iter()
                .map(|&(by, bx)| (-((y - by).powi(2) + (x - bx).powi(2)) / 3.0).exp())
                .sum()
        })
        .collect();
    let peak = img.iter().copied().fold(0.0, f64::max);
    for v in &mut img {
        *v /= peak;
    }
    img
}
