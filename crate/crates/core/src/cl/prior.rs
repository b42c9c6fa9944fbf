//! Per-weight Gaussian priors and the masked prior recursion.

use serde::{Deserialize, Serialize};

use crate::dist::GaussianParams;
use crate::ibp::IbpLayer;
use crate::net::DenseLayer;
use crate::tensor::Tensor;

/// Elementwise Gaussian prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianPrior {
    pub mean: Tensor,
    pub var: Tensor,
}

impl GaussianPrior {
    /// `N(0, σ₀²)` of the given shape.
    pub fn initial(shape: &[usize], sigma0: f64) -> Self {
        Self {
            mean: Tensor::zeros(shape),
            var: Tensor::full(shape, sigma0 * sigma0),
        }
    }

    pub fn from_posterior(q: &GaussianParams) -> Self {
        Self {
            mean: q.mean.clone(),
            var: q.variance(),
        }
    }

    /// Takes `q` where `select` is 1 and `N(0, σ₀²)` elsewhere.
    pub fn masked(q: &GaussianParams, select: &Tensor, sigma0: f64) -> Self {
        let var = q.variance();
        let s0 = sigma0 * sigma0;
        Self {
            mean: q.mean.zip_map(select, |m, b| if b > 0.0 { m } else { 0.0 }),
            var: var.zip_map(select, |v, b| if b > 0.0 { v } else { s0 }),
        }
    }

    fn pad(&mut self, rows: usize, cols: usize, sigma0: f64) {
        let s0 = sigma0 * sigma0;
        let (mean, var) = (&self.mean, &self.var);
        let inside = |r: usize, c: usize| r < mean.rows() && c < mean.cols();
        let new_mean = Tensor::from_fn(rows, cols, |r, c| if inside(r, c) { mean.get(r, c) } else { 0.0 });
        let new_var = Tensor::from_fn(rows, cols, |r, c| if inside(r, c) { var.get(r, c) } else { s0 });
        self.mean = new_mean;
        self.var = new_var;
    }
}

/// Prior over one IBP layer: Gaussian weights and biases, `Beta(α, 1)` sticks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPrior {
    pub weights: GaussianPrior,
    pub bias: GaussianPrior,
    pub stick_alpha: f64,
}

/// Prior over an unmasked Gaussian layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensePrior {
    pub weights: GaussianPrior,
    pub bias: GaussianPrior,
}

impl DensePrior {
    pub fn initial(d: usize, k: usize, sigma0: f64) -> Self {
        Self {
            weights: GaussianPrior::initial(&[d, k], sigma0),
            bias: GaussianPrior::initial(&[1, k], sigma0),
        }
    }

    pub fn from_posterior(q: &DenseLayer) -> Self {
        Self {
            weights: GaussianPrior::from_posterior(&q.weights),
            bias: GaussianPrior::from_posterior(&q.bias),
        }
    }

    fn pad_rows(&mut self, rows: usize, sigma0: f64) {
        let cols = self.weights.mean.cols();
        self.weights.pad(rows, cols, sigma0);
    }
}

/// Priors for every shared layer of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorStore {
    /// `σ₀` of the initial prior `p₀ = N(0, σ₀²)`.
    pub sigma0: f64,
    pub layers: Vec<LayerPrior>,
    /// Shared unmasked layers (VAE latent heads and output layer).
    pub dense: Vec<DensePrior>,
    /// Per-task head priors.
    pub heads: Vec<DensePrior>,
}

impl PriorStore {
    /// `p₀` for every layer.
    pub fn initial(layers: &[IbpLayer], dense: &[DenseLayer], sigma0: f64, alpha: f64) -> Self {
        Self {
            sigma0,
            layers: layers
                .iter()
                .map(|l| LayerPrior {
                    weights: GaussianPrior::initial(l.weights.shape(), sigma0),
                    bias: GaussianPrior::initial(l.bias.shape(), sigma0),
                    stick_alpha: alpha,
                })
                .collect(),
            dense: dense
                .iter()
                .map(|d| DensePrior::initial(d.input_dim(), d.output_dim(), sigma0))
                .collect(),
            heads: Vec::new(),
        }
    }

    /// Pads layer `l` with `p₀` entries up to `rows × cols`.
    pub fn pad_layer(&mut self, l: usize, rows: usize, cols: usize) {
        let s0 = self.sigma0;
        let lp = &mut self.layers[l];
        lp.weights.pad(rows, cols, s0);
        lp.bias.pad(1, cols, s0);
    }

    pub fn pad_dense_rows(&mut self, idx: usize, rows: usize) {
        let s0 = self.sigma0;
        self.dense[idx].pad_rows(rows, s0);
    }

    pub fn pad_head_rows(&mut self, rows: usize) {
        let s0 = self.sigma0;
        for h in &mut self.heads {
            h.pad_rows(rows, s0);
        }
    }

    /// The posterior itself as prior for every layer and head (no masking).
    pub fn from_posterior(layers: &[IbpLayer], dense: &[DenseLayer], heads: &[DenseLayer], sigma0: f64) -> Self {
        Self {
            sigma0,
            layers: layers
                .iter()
                .map(|l| LayerPrior {
                    weights: GaussianPrior::from_posterior(&l.weights),
                    bias: GaussianPrior::from_posterior(&l.bias),
                    stick_alpha: l.alpha,
                })
                .collect(),
            dense: dense.iter().map(DensePrior::from_posterior).collect(),
            heads: heads.iter().map(DensePrior::from_posterior).collect(),
        }
    }
}

/// Columns with at least one active input in `mask`, as a `[1, K]` indicator.
pub fn used_columns(mask: &Tensor) -> Tensor {
    Tensor::row(
        (0..mask.cols())
            .map(|c| {
                if (0..mask.rows()).any(|r| mask.get(r, c) > 0.0) {
                    1.0
                } else {
                    0.0
                }
            })
            .collect(),
    )
}

/// `p_t(V_{d,k}) = B°_{d,k} q_{t-1}(V_{d,k}) + (1 - B°_{d,k}) p₀(V_{d,k})`.
///
/// `union` holds one combined mask per layer. Biases follow the column
/// indicator of the union mask. Stick priors become `Beta(α_l, 1)` with the
/// layer's current concentration.
pub fn masked_prior_update(posterior: &[IbpLayer], union: &[Tensor], sigma0: f64) -> Vec<LayerPrior> {
    posterior
        .iter()
        .zip(union)
        .map(|(q, b)| LayerPrior {
            weights: GaussianPrior::masked(&q.weights, b, sigma0),
            bias: GaussianPrior::masked(&q.bias, &used_columns(b), sigma0),
            stick_alpha: q.alpha,
        })
        .collect()
}

/// `α ← max(α, max_k a_k)`.
pub fn alpha_update(layer: &IbpLayer) -> f64 {
    layer
        .sticks
        .a()
        .data()
        .iter()
        .copied()
        .fold(layer.alpha, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ibp::LayerInit;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn layer() -> IbpLayer {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut l = IbpLayer::new(3, 4, &LayerInit::default(), &mut rng);
        l.weights.raw_sigma = Tensor::from_fn(3, 4, |_, _| rng.random_range(-3.0..0.0));
        l
    }

    #[test]
    fn all_ones_gives_previous_posterior() {
        let q = layer();
        let p = masked_prior_update(std::slice::from_ref(&q), &[Tensor::full(&[3, 4], 1.0)], 0.6);
        assert_eq!(p[0].weights.mean, q.weights.mean);
        assert_eq!(p[0].weights.var, q.weights.variance());
        assert_eq!(p[0].bias.var, q.bias.variance());
    }

    #[test]
    fn all_zeros_gives_initial_prior() {
        let q = layer();
        let p = masked_prior_update(std::slice::from_ref(&q), &[Tensor::zeros(&[3, 4])], 0.6);
        assert_eq!(p[0].weights, GaussianPrior::initial(&[3, 4], 0.6));
        assert_eq!(p[0].bias, GaussianPrior::initial(&[1, 4], 0.6));
    }

    #[test]
    fn mixed_mask_selects_elementwise() {
        let q = layer();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mask = Tensor::from_fn(3, 4, |_, _| if rng.random::<bool>() { 1.0 } else { 0.0 });
        let p = masked_prior_update(std::slice::from_ref(&q), std::slice::from_ref(&mask), 0.6);
        let var = q.weights.variance();
        for r in 0..3 {
            for c in 0..4 {
                let (m, v) = if mask.get(r, c) == 1.0 {
                    (q.weights.mean.get(r, c), var.get(r, c))
                } else {
                    (0.0, 0.36)
                };
                assert_eq!(p[0].weights.mean.get(r, c), m);
                assert!((p[0].weights.var.get(r, c) - v).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn alpha_update_examples() {
        let mut l = layer();
        l.alpha = 30.0;
        l.sticks = crate::dist::KumaraswamyParams::new(4, 12.0, 1.0);
        assert_eq!(alpha_update(&l), 30.0);
        l.sticks = crate::dist::KumaraswamyParams::new(4, 41.5, 1.0);
        assert!((alpha_update(&l) - 41.5).abs() < 1e-9);
    }

    #[test]
    fn padding_fills_with_initial_prior() {
        let q = layer();
        let mut store = PriorStore::initial(std::slice::from_ref(&q), &[], 0.6, 30.0);
        store.layers = masked_prior_update(std::slice::from_ref(&q), &[Tensor::full(&[3, 4], 1.0)], 0.6);
        store.pad_layer(0, 5, 6);
        let w = &store.layers[0].weights;
        assert_eq!(w.mean.shape(), &[5, 6]);
        assert_eq!(w.mean.get(1, 2), q.weights.mean.get(1, 2));
        assert_eq!(w.var.get(4, 5), 0.36);
        assert_eq!(w.mean.get(0, 5), 0.0);
    }
}
