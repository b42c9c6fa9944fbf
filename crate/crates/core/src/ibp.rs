//! IBP-masked layers.
//!
//! A layer's effective weight matrix is `W = B ⊙ V` where `V` carries a
//! mean-field Gaussian posterior and `B` is a binary mask whose columns share
//! a truncated stick-breaking prior: `ν_k ~ Beta(α, 1)`, `π_k = Π_{i≤k} ν_i`,
//! `B_{d,k} ~ Bernoulli(π_k)`. The posterior over `B` is conditioned on the
//! sticks through `θ_{d,k} = σ(ρ_{d,k} + logit π_k)`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::dist::{self, DistError, GaussianParams, GaussianVars, KumaraswamyParams, KumaraswamyVars};
use crate::special;
use crate::tensor::Tensor;

/// Soft mask values strictly above this harden to 1.
pub const HARDEN_THRESHOLD: f64 = 0.5;

/// Initialization constants shared by fresh layers and expanded columns.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerInit {
    /// Standard deviation of the initial posterior means.
    pub mean_std: f64,
    /// Initial posterior standard deviation.
    pub sigma: f64,
    /// IBP concentration; fresh sticks start at `Kumaraswamy(α, 1)`.
    pub alpha: f64,
}

impl Default for LayerInit {
    fn default() -> Self {
        Self {
            mean_std: 0.1,
            sigma: 0.05,
            alpha: 30.0,
        }
    }
}

/// Variational state of one IBP-masked layer (`D` inputs, truncation `K`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IbpLayer {
    pub weights: GaussianParams,
    pub bias: GaussianParams,
    pub sticks: KumaraswamyParams,
    /// Mask logits `ρ`, `D × K`.
    pub mask_logits: Tensor,
    /// IBP concentration used for this layer's stick prior.
    pub alpha: f64,
}

impl IbpLayer {
    pub fn new(d: usize, k: usize, init: &LayerInit, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, init.mean_std).expect("positive std");
        let mean = Tensor::from_fn(d, k, |_, _| normal.sample(rng));
        Self {
            weights: GaussianParams::new(mean, init.sigma),
            bias: GaussianParams::new(Tensor::zeros(&[1, k]), init.sigma),
            sticks: KumaraswamyParams::new(k, init.alpha, 1.0),
            mask_logits: Tensor::zeros(&[d, k]),
            alpha: init.alpha,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weights.mean.rows()
    }

    pub fn truncation(&self) -> usize {
        self.weights.mean.cols()
    }

    /// Posterior-mean stick proportions `π̄_k = Π_{i≤k} E[ν_i]`.
    pub fn mean_pis(&self) -> Tensor {
        stick_pis(&self.sticks.mean())
    }

    /// `θ_{d,k} = σ(ρ_{d,k} + logit π̄_k)` under posterior-mean sticks.
    pub fn mean_mask_probs(&self) -> Tensor {
        let logit_pi = self.mean_pis().map(special::logit);
        let k = self.truncation();
        Tensor::from_fn(self.input_dim(), k, |r, c| {
            special::sigmoid(self.mask_logits.get(r, c) + logit_pi.get(0, c))
        })
    }

    /// Deterministic binary mask: the median Concrete draw (`u = 1/2`) hardened.
    pub fn hardened_mask(&self) -> Tensor {
        // σ(logit θ / λ) > 1/2  ⇔  θ > 1/2 for any λ > 0
        harden(&self.mean_mask_probs())
    }

    /// Appends `extra` fresh columns.
    pub fn append_columns(&mut self, extra: usize, init: &LayerInit, rng: &mut impl Rng) {
        if extra == 0 {
            return;
        }
        let normal = Normal::new(0.0, init.mean_std).expect("positive std");
        self.weights
            .append_cols(extra, |_, _| normal.sample(rng), init.sigma);
        self.bias.append_cols(extra, |_, _| 0.0, init.sigma);
        self.sticks.append(extra, self.alpha, 1.0);
        self.mask_logits.append_cols(extra, |_, _| 0.0);
    }

    /// Appends `extra` input rows (the previous layer grew).
    pub fn append_inputs(&mut self, extra: usize, init: &LayerInit, rng: &mut impl Rng) {
        if extra == 0 {
            return;
        }
        let normal = Normal::new(0.0, init.mean_std).expect("positive std");
        append_rows(&mut self.weights.mean, extra, |_, _| normal.sample(rng));
        let raw = special::softplus_inv(init.sigma);
        append_rows(&mut self.weights.raw_sigma, extra, |_, _| raw);
        append_rows(&mut self.mask_logits, extra, |_, _| 0.0);
    }
}

pub(crate) fn append_rows(t: &mut Tensor, extra: usize, mut fill: impl FnMut(usize, usize) -> f64) {
    let (rows, cols) = (t.rows(), t.cols());
    let mut data = t.data().to_vec();
    for r in 0..extra {
        for c in 0..cols {
            data.push(fill(rows + r, c));
        }
    }
    *t = Tensor::new(vec![rows + extra, cols], data).expect("consistent shape");
}

/// `π_k = Π_{i≤k} ν_i`, accumulated in log space.
pub fn stick_pis(nu: &Tensor) -> Tensor {
    let mut out = nu.clone();
    let mut acc = 0.0;
    for v in out.data_mut() {
        acc += v.ln();
        *v = acc.exp();
    }
    out
}

/// `1[b > 0.5]` elementwise; exactly 0.5 maps to 0.
pub fn harden(soft: &Tensor) -> Tensor {
    soft.map(|v| if v > HARDEN_THRESHOLD { 1.0 } else { 0.0 })
}

/// Grows `mask` with zero rows/columns to `rows × cols`.
pub fn pad_mask(mask: &Tensor, rows: usize, cols: usize) -> Tensor {
    Tensor::from_fn(rows, cols, |r, c| {
        if r < mask.rows() && c < mask.cols() {
            mask.get(r, c)
        } else {
            0.0
        }
    })
}

/// Elementwise OR after zero-padding every mask to the largest shape.
pub fn union_masks(masks: &[&Tensor]) -> Option<Tensor> {
    let rows = masks.iter().map(|m| m.rows()).max()?;
    let cols = masks.iter().map(|m| m.cols()).max()?;
    let mut out = Tensor::zeros(&[rows, cols]);
    for m in masks {
        let p = pad_mask(m, rows, cols);
        for (o, &v) in out.data_mut().iter_mut().zip(p.data()) {
            if v > 0.0 {
                *o = 1.0;
            }
        }
    }
    Some(out)
}

/// Trailing-empty-column indicators and the expansion count `G = T - Σ_j C_j`.
///
/// `C_j = C_{j+1} · Π_d 1[B_{d,j} = 0]` with `C_{K+1} = 1`, so `Σ C` counts
/// the run of all-zero columns at the right edge of the mask.
pub fn expansion_count(mask: &Tensor, reserve: usize) -> (Vec<u8>, usize) {
    let (d, k) = (mask.rows(), mask.cols());
    let mut c = vec![0u8; k];
    let mut next = 1u8;
    for j in (0..k).rev() {
        let empty = (0..d).all(|r| mask.get(r, j) == 0.0);
        next *= u8::from(empty);
        c[j] = next;
    }
    let trailing: usize = c.iter().map(|&v| v as usize).sum();
    (c, reserve.saturating_sub(trailing))
}

/// Grows `layer` so that at least `reserve` trailing columns of `mask` are empty.
/// Returns the number of columns added; never shrinks.
pub fn expand(
    layer: &mut IbpLayer,
    mask: &Tensor,
    reserve: usize,
    init: &LayerInit,
    rng: &mut impl Rng,
) -> usize {
    let (_, grow) = expansion_count(mask, reserve);
    layer.append_columns(grow, init, rng);
    grow
}

/// How the mask is formed during a forward pass.
#[derive(Debug, Clone, Copy)]
pub enum MaskMode<'a> {
    /// Sample sticks and a relaxed Concrete mask at the given temperature.
    Stochastic { temperature: f64 },
    /// Use a stored binary mask.
    Frozen(&'a Tensor),
    /// All-ones mask, unscaled bias.
    Dense,
}

/// Noise for one Monte Carlo pass through one layer.
#[derive(Debug, Clone)]
pub struct LayerNoise {
    pub stick_u: Tensor,
    pub mask_u: Tensor,
    pub weight_eps: Tensor,
    pub bias_eps: Tensor,
}

impl LayerNoise {
    pub fn draw(d: usize, k: usize, mask_rng: &mut impl Rng, weight_rng: &mut impl Rng) -> Self {
        Self {
            stick_u: crate::rng::uniform(mask_rng, 1, k),
            mask_u: crate::rng::uniform(mask_rng, d, k),
            weight_eps: crate::rng::normal(weight_rng, d, k),
            bias_eps: crate::rng::normal(weight_rng, 1, k),
        }
    }
}

/// A layer's parameters placed on a graph.
#[derive(Debug, Clone, Copy)]
pub struct BoundLayer {
    pub weights: GaussianVars,
    pub bias: GaussianVars,
    pub sticks: KumaraswamyVars,
    pub mask_logits: Var,
    pub d: usize,
    pub k: usize,
}

impl BoundLayer {
    /// Binds `layer`. Gaussian and structure (stick/mask) parameters are
    /// independently trainable or constant.
    pub fn new(g: &mut Graph, layer: &IbpLayer, train_gauss: bool, train_structure: bool) -> Self {
        let weights = if train_gauss {
            layer.weights.bind(g)
        } else {
            layer.weights.bind_frozen(g)
        };
        let bias = if train_gauss {
            layer.bias.bind(g)
        } else {
            layer.bias.bind_frozen(g)
        };
        let (sticks, mask_logits) = if train_structure {
            (layer.sticks.bind(g), g.param(layer.mask_logits.clone()))
        } else {
            (
                KumaraswamyVars {
                    raw_a: g.constant(layer.sticks.raw_a.clone()),
                    raw_b: g.constant(layer.sticks.raw_b.clone()),
                },
                g.constant(layer.mask_logits.clone()),
            )
        };
        Self {
            weights,
            bias,
            sticks,
            mask_logits,
            d: layer.input_dim(),
            k: layer.truncation(),
        }
    }
}

/// Output of one layer pass.
#[derive(Debug, Clone, Copy)]
pub struct LayerOutput {
    /// Pre-activation `x·(B ⊙ V) + b ⊙ colmax(B)`, `N × K`.
    pub pre_activation: Var,
    /// Single-sample mask KL `Σ ln q(Y) - ln p(Y)` (stochastic mode only).
    pub mask_kl: Option<Var>,
    /// Relaxed mask (stochastic mode only).
    pub soft_mask: Option<Var>,
}

/// Masked affine transform. `noise = None` uses posterior means for `V` and `b`.
pub fn layer_forward(
    g: &mut Graph,
    layer: &BoundLayer,
    x: Var,
    noise: Option<&LayerNoise>,
    mode: MaskMode<'_>,
) -> Result<LayerOutput, DistError> {
    let n = g.shape(x)[0];
    if g.shape(x).get(1) != Some(&layer.d) {
        return Err(DistError::Autodiff(crate::autodiff::AutodiffError::ShapeMismatch {
            op: "layer_forward",
            lhs: g.shape(x).to_vec(),
            rhs: vec![layer.d, layer.k],
        }));
    }
    if layer.k == 0 {
        return Err(DistError::NonPositiveParameter {
            name: "truncation",
            value: 0.0,
        });
    }
    let (v, b) = match noise {
        Some(z) => (
            dist::gaussian_sample(g, layer.weights, &z.weight_eps)?,
            dist::gaussian_sample(g, layer.bias, &z.bias_eps)?,
        ),
        None => (layer.weights.mean, layer.bias.mean),
    };

    let (w, bias_scale, mask_kl, soft_mask) = match mode {
        MaskMode::Dense => (v, None, None, None),
        MaskMode::Frozen(mask) => {
            let m = g.constant(mask.clone());
            let w = g.mul(m, v)?;
            let cm = g.col_max(m)?;
            (w, Some(cm), None, None)
        }
        MaskMode::Stochastic { temperature } => {
            let z = noise.ok_or(DistError::NonPositiveParameter {
                name: "noise for stochastic mask",
                value: 0.0,
            })?;
            let log_nu = dist::kumaraswamy_log_sample(g, layer.sticks, &z.stick_u)?;
            let log_pi = g.cumsum_cols(log_nu)?;
            let log_1m_pi = g.log1mexp(log_pi)?;
            let logit_pi = g.sub(log_pi, log_1m_pi)?;
            let prior_logits = g.broadcast_rows(logit_pi, layer.d)?;
            let q_logits = g.add(layer.mask_logits, prior_logits)?;
            let (y, soft) = dist::concrete_sample(g, q_logits, temperature, &z.mask_u)?;
            let kl = dist::concrete_kl_mc(g, y, q_logits, prior_logits, temperature)?;
            let w = g.mul(soft, v)?;
            let cm = g.col_max(soft)?;
            (w, Some(cm), Some(kl), Some(soft))
        }
    };

    let xw = g.matmul(x, w)?;
    let b = match bias_scale {
        Some(s) => g.mul(b, s)?,
        None => b,
    };
    let b_rows = g.broadcast_rows(b, n)?;
    let pre_activation = g.add(xw, b_rows)?;
    Ok(LayerOutput {
        pre_activation,
        mask_kl,
        soft_mask,
    })
}
