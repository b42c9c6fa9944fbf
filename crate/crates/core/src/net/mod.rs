//! Bayesian networks assembled from IBP-masked layers, and their ELBOs.
//!
//! Two models share the same machinery: [`SupervisedModel`], a multi-head
//! classifier whose hidden stack is shared by every task, and [`VaeModel`],
//! a VAE whose encoder and decoder are IBP-masked with per-task masks.
//! A forward pass is driven by a [`Pass`] (how masks are formed) and a
//! slice of pre-drawn [`SampleNoise`], so any ELBO evaluation can be
//! replayed exactly by re-supplying the same noise.

mod supervised;
mod vae;

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, Var};
use crate::cl::prior::{DensePrior, GaussianPrior, LayerPrior};
use crate::dist::{self, DistError, GaussianParams, GaussianVars};
use crate::ibp::{self, BoundLayer, IbpLayer, LayerInit, LayerNoise, MaskMode};
use crate::tensor::Tensor;

pub use supervised::{accuracy, supervised_elbo, BoundSupervised, SupervisedModel};
pub use vae::{LATENT_MEAN, LATENT_SIGMA, bernoulli_log_lik, vae_elbo, vae_generate, BoundVae, VaeModel};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NetError {
    #[error("unknown task {0}")]
    UnknownTask(usize),
    #[error("empty batch")]
    EmptyBatch,
    #[error("input value {0} outside [0, 1]")]
    PixelRange(f64),
    #[error("model has no parameter {0}")]
    UnknownParam(String),
    #[error("no stored mask for task {0}")]
    MissingMask(usize),
    #[error(transparent)]
    Dist(#[from] DistError),
}

impl From<AutodiffError> for NetError {
    fn from(e: AutodiffError) -> Self {
        NetError::Dist(DistError::Autodiff(e))
    }
}

pub type Result<T> = std::result::Result<T, NetError>;

/// Unmasked Gaussian-posterior affine layer (task heads, VAE latent heads and output).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weights: GaussianParams,
    pub bias: GaussianParams,
}

impl DenseLayer {
    pub fn new(d: usize, k: usize, init: &LayerInit, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, init.mean_std).expect("positive std");
        Self {
            weights: GaussianParams::new(Tensor::from_fn(d, k, |_, _| normal.sample(rng)), init.sigma),
            bias: GaussianParams::new(Tensor::zeros(&[1, k]), init.sigma),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weights.mean.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.mean.cols()
    }

    /// Appends `extra` zero-mean input rows.
    pub fn append_inputs(&mut self, extra: usize, sigma: f64) {
        ibp::append_rows(&mut self.weights.mean, extra, |_, _| 0.0);
        let raw = crate::special::softplus_inv(sigma);
        ibp::append_rows(&mut self.weights.raw_sigma, extra, |_, _| raw);
    }

    fn bind(&self, g: &mut Graph, trainable: bool) -> BoundDense {
        if trainable {
            BoundDense {
                weights: self.weights.bind(g),
                bias: self.bias.bind(g),
            }
        } else {
            BoundDense {
                weights: self.weights.bind_frozen(g),
                bias: self.bias.bind_frozen(g),
            }
        }
    }

    fn field_mut(&mut self, f: DenseField) -> &mut Tensor {
        match f {
            DenseField::WeightMean => &mut self.weights.mean,
            DenseField::WeightRawSigma => &mut self.weights.raw_sigma,
            DenseField::BiasMean => &mut self.bias.mean,
            DenseField::BiasRawSigma => &mut self.bias.raw_sigma,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct BoundDense {
    weights: GaussianVars,
    bias: GaussianVars,
}

fn dense_forward(g: &mut Graph, layer: &BoundDense, x: Var, eps: Option<&(Tensor, Tensor)>) -> Result<Var> {
    let n = g.shape(x)[0];
    let (w, b) = match eps {
        Some((ew, eb)) => (
            dist::gaussian_sample(g, layer.weights, ew)?,
            dist::gaussian_sample(g, layer.bias, eb)?,
        ),
        None => (layer.weights.mean, layer.bias.mean),
    };
    let xw = g.matmul(x, w)?;
    let br = g.broadcast_rows(b, n)?;
    Ok(g.add(xw, br)?)
}

fn dense_kl(g: &mut Graph, layer: &BoundDense, prior: &DensePrior) -> Result<Var> {
    let kw = gaussian_prior_kl(g, layer.weights, &prior.weights)?;
    let kb = gaussian_prior_kl(g, layer.bias, &prior.bias)?;
    Ok(g.add(kw, kb)?)
}

fn gaussian_prior_kl(g: &mut Graph, q: GaussianVars, p: &GaussianPrior) -> Result<Var> {
    Ok(dist::gaussian_kl(g, q, &p.mean, &p.var)?)
}

fn ibp_layer_kls(g: &mut Graph, layer: &BoundLayer, prior: &LayerPrior, with_sticks: bool) -> Result<(Var, Option<Var>)> {
    let kw = gaussian_prior_kl(g, layer.weights, &prior.weights)?;
    let kb = gaussian_prior_kl(g, layer.bias, &prior.bias)?;
    let gauss = g.add(kw, kb)?;
    let sticks = if with_sticks {
        Some(dist::kumaraswamy_beta_kl(g, layer.sticks, prior.stick_alpha, 1.0)?)
    } else {
        None
    };
    Ok((gauss, sticks))
}

/// Which fields of an IBP layer a parameter id refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum IbpField {
    WeightMean,
    WeightRawSigma,
    BiasMean,
    BiasRawSigma,
    StickRawA,
    StickRawB,
    MaskLogits,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DenseField {
    WeightMean,
    WeightRawSigma,
    BiasMean,
    BiasRawSigma,
}

/// Stable identifier of a trainable tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ParamId {
    Ibp { layer: usize, field: IbpField },
    Dense { index: usize, field: DenseField },
    Head { task: usize, field: DenseField },
}

/// Learning-rate group.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    /// Gaussian weight and bias posteriors.
    Gaussian,
    /// Stick-breaking and mask-logit posteriors.
    Structure,
}

impl ParamId {
    pub fn group(&self) -> ParamGroup {
        match self {
            ParamId::Ibp {
                field: IbpField::StickRawA | IbpField::StickRawB | IbpField::MaskLogits,
                ..
            } => ParamGroup::Structure,
            _ => ParamGroup::Gaussian,
        }
    }
}

impl fmt::Display for ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamId::Ibp { layer, field } => write!(f, "ibp.{layer}.{field:?}"),
            ParamId::Dense { index, field } => write!(f, "dense.{index}.{field:?}"),
            ParamId::Head { task, field } => write!(f, "head.{task}.{field:?}"),
        }
    }
}

fn ibp_field_mut(layer: &mut IbpLayer, f: IbpField) -> &mut Tensor {
    match f {
        IbpField::WeightMean => &mut layer.weights.mean,
        IbpField::WeightRawSigma => &mut layer.weights.raw_sigma,
        IbpField::BiasMean => &mut layer.bias.mean,
        IbpField::BiasRawSigma => &mut layer.bias.raw_sigma,
        IbpField::StickRawA => &mut layer.sticks.raw_a,
        IbpField::StickRawB => &mut layer.sticks.raw_b,
        IbpField::MaskLogits => &mut layer.mask_logits,
    }
}

fn bind_ibp_layers(
    g: &mut Graph,
    layers: &[IbpLayer],
    train: Trainable,
    params: &mut Vec<(ParamId, Var)>,
) -> Vec<BoundLayer> {
    layers
        .iter()
        .enumerate()
        .map(|(l, layer)| {
            let b = BoundLayer::new(g, layer, train.gaussian, train.structure);
            if train.gaussian {
                params.push((ParamId::Ibp { layer: l, field: IbpField::WeightMean }, b.weights.mean));
                params.push((ParamId::Ibp { layer: l, field: IbpField::WeightRawSigma }, b.weights.raw_sigma));
                params.push((ParamId::Ibp { layer: l, field: IbpField::BiasMean }, b.bias.mean));
                params.push((ParamId::Ibp { layer: l, field: IbpField::BiasRawSigma }, b.bias.raw_sigma));
            }
            if train.structure {
                params.push((ParamId::Ibp { layer: l, field: IbpField::StickRawA }, b.sticks.raw_a));
                params.push((ParamId::Ibp { layer: l, field: IbpField::StickRawB }, b.sticks.raw_b));
                params.push((ParamId::Ibp { layer: l, field: IbpField::MaskLogits }, b.mask_logits));
            }
            b
        })
        .collect()
}

fn dense_params(bound: &BoundDense, id: impl Fn(DenseField) -> ParamId, params: &mut Vec<(ParamId, Var)>) {
    params.push((id(DenseField::WeightMean), bound.weights.mean));
    params.push((id(DenseField::WeightRawSigma), bound.weights.raw_sigma));
    params.push((id(DenseField::BiasMean), bound.bias.mean));
    params.push((id(DenseField::BiasRawSigma), bound.bias.raw_sigma));
}

/// Which parameter groups are placed on the graph as trainable leaves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Trainable {
    pub gaussian: bool,
    pub structure: bool,
}

impl Trainable {
    pub const ALL: Self = Self {
        gaussian: true,
        structure: true,
    };
    pub const GAUSSIAN: Self = Self {
        gaussian: true,
        structure: false,
    };
    pub const NONE: Self = Self {
        gaussian: false,
        structure: false,
    };
}

/// How masks are formed in a forward pass.
#[derive(Debug, Clone, Copy)]
pub enum Pass<'a> {
    /// Sampled sticks and relaxed masks at temperature `λ`.
    Stochastic { temperature: f64 },
    /// Stored binary masks, one per IBP layer.
    Frozen(&'a [Tensor]),
    /// All-ones masks.
    Dense,
}

impl<'a> Pass<'a> {
    fn layer_mode(&self, l: usize) -> MaskMode<'a> {
        match *self {
            Pass::Stochastic { temperature } => MaskMode::Stochastic { temperature },
            Pass::Frozen(masks) => MaskMode::Frozen(&masks[l]),
            Pass::Dense => MaskMode::Dense,
        }
    }

    fn is_stochastic(&self) -> bool {
        matches!(self, Pass::Stochastic { .. })
    }
}

/// Terms of one ELBO evaluation.
#[derive(Debug, Clone, Copy)]
pub struct ElboTerms {
    /// Negative ELBO (minimization target).
    pub loss: Var,
    /// Sample-averaged, unscaled minibatch log-likelihood.
    pub log_lik: f64,
    pub kl_gauss: f64,
    pub kl_sticks: f64,
    /// Sample-averaged single-sample mask KL estimate.
    pub kl_mask: f64,
}

/// Settings of one objective evaluation.
#[derive(Debug, Clone, Copy)]
pub struct Objective<'a> {
    pub pass: Pass<'a>,
    /// Include the KL terms (false gives maximum likelihood).
    pub with_kl: bool,
    /// Minibatch-to-dataset rescaling `N / batch`.
    pub data_scale: f64,
}

/// Noise for one Monte Carlo sample through a whole model.
#[derive(Debug, Clone)]
pub struct SampleNoise {
    pub layers: Vec<LayerNoise>,
    pub dense: Vec<(Tensor, Tensor)>,
    /// Latent `ε` for the VAE reparameterization.
    pub latent: Option<Tensor>,
}

fn draw_layer_noise(
    layers: &[IbpLayer],
    stochastic: bool,
    mask_rng: &mut impl Rng,
    weight_rng: &mut impl Rng,
) -> Vec<LayerNoise> {
    layers
        .iter()
        .map(|l| {
            let (d, k) = (l.input_dim(), l.truncation());
            if stochastic {
                LayerNoise::draw(d, k, mask_rng, weight_rng)
            } else {
                LayerNoise {
                    stick_u: Tensor::zeros(&[0, 0]),
                    mask_u: Tensor::zeros(&[0, 0]),
                    weight_eps: crate::rng::normal(weight_rng, d, k),
                    bias_eps: crate::rng::normal(weight_rng, 1, k),
                }
            }
        })
        .collect()
}

fn draw_dense_noise(layer: &DenseLayer, rng: &mut impl Rng) -> (Tensor, Tensor) {
    (
        crate::rng::normal(rng, layer.input_dim(), layer.output_dim()),
        crate::rng::normal(rng, 1, layer.output_dim()),
    )
}

/// Runs the IBP stack with ReLU activations; returns the final activation
/// and the summed mask KL (when stochastic).
fn ibp_stack_forward(
    g: &mut Graph,
    layers: &[BoundLayer],
    offset: usize,
    x: Var,
    noise: Option<&SampleNoise>,
    pass: Pass<'_>,
) -> Result<(Var, Option<Var>)> {
    let mut h = x;
    let mut mask_kl: Option<Var> = None;
    for (i, layer) in layers.iter().enumerate() {
        let l = offset + i;
        let out = ibp::layer_forward(g, layer, h, noise.map(|n| &n.layers[l]), pass.layer_mode(l))?;
        h = g.relu(out.pre_activation);
        if let Some(kl) = out.mask_kl {
            mask_kl = Some(match mask_kl {
                Some(acc) => g.add(acc, kl)?,
                None => kl,
            });
        }
    }
    Ok((h, mask_kl))
}

fn sum_vars(g: &mut Graph, vars: &[Var]) -> Result<Option<Var>> {
    let mut acc: Option<Var> = None;
    for &v in vars {
        acc = Some(match acc {
            Some(a) => g.add(a, v)?,
            None => v,
        });
    }
    Ok(acc)
}

/// Combines per-sample likelihoods and KL terms into the negative ELBO
/// `-[(1/S) Σ_i (ℓ_i · scale - KL_mask,i) - KL_gauss - KL_sticks]`.
fn compose_loss(
    g: &mut Graph,
    log_liks: &[Var],
    mask_kls: &[Option<Var>],
    kl_gauss: Option<Var>,
    kl_sticks: Option<Var>,
    obj: &Objective<'_>,
) -> Result<ElboTerms> {
    let s = log_liks.len() as f64;
    let mut per_sample = Vec::with_capacity(log_liks.len());
    let mut ll_total = 0.0;
    let mut mask_total = 0.0;
    for (i, &ll) in log_liks.iter().enumerate() {
        ll_total += g.value(ll).item();
        let mut term = g.scale(ll, obj.data_scale)?;
        if obj.with_kl {
            if let Some(kl) = mask_kls.get(i).copied().flatten() {
                mask_total += g.value(kl).item();
                term = g.sub(term, kl)?;
            }
        }
        per_sample.push(term);
    }
    let avg = sum_vars(g, &per_sample)?.ok_or(NetError::EmptyBatch)?;
    let avg = g.scale(avg, 1.0 / s)?;
    let mut elbo = avg;
    let mut kg = 0.0;
    let mut ks = 0.0;
    if obj.with_kl {
        if let Some(k) = kl_gauss {
            kg = g.value(k).item();
            elbo = g.sub(elbo, k)?;
        }
        if let Some(k) = kl_sticks {
            ks = g.value(k).item();
            elbo = g.sub(elbo, k)?;
        }
    }
    let loss = g.neg(elbo);
    Ok(ElboTerms {
        loss,
        log_lik: ll_total / s,
        kl_gauss: kg,
        kl_sticks: ks,
        kl_mask: mask_total / s,
    })
}

/// Independent child generator seeded from `rng`.
pub(crate) fn split(rng: &mut impl Rng) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(rng.random())
}

/// Trainable tensors and their graph handles, in binding order.
#[derive(Debug, Clone, Default)]
pub struct Binding {
    pub params: Vec<(ParamId, Var)>,
}
