//! Reparameterized samplers and KL divergences.
//!
//! Gaussian weights use the location-scale transform, stick proportions use
//! the Kumaraswamy inverse CDF as a surrogate for Beta posteriors, and
//! binary masks use the binary Concrete (Gumbel-sigmoid) relaxation. Every
//! sampler is a deterministic function of its parameters and the supplied
//! noise tensor.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, Var};
use crate::special::{self, EULER_GAMMA};
use crate::tensor::Tensor;

/// Terms kept from the infinite series of the Kumaraswamy–Beta KL.
pub const KUMARASWAMY_SERIES_TERMS: usize = 11;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DistError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("prior variance must be positive, found {0}")]
    NonPositiveVariance(f64),
    #[error("{name} must be positive, found {value}")]
    NonPositiveParameter { name: &'static str, value: f64 },
}

pub type Result<T> = std::result::Result<T, DistError>;

/// Mean-field Gaussian with `σ = softplus(raw_sigma)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianParams {
    pub mean: Tensor,
    pub raw_sigma: Tensor,
}

impl GaussianParams {
    pub fn new(mean: Tensor, sigma: f64) -> Self {
        let raw_sigma = Tensor::full(mean.shape(), special::softplus_inv(sigma));
        Self { mean, raw_sigma }
    }

    pub fn sigma(&self) -> Tensor {
        self.raw_sigma.map(special::softplus)
    }

    pub fn variance(&self) -> Tensor {
        self.raw_sigma.map(|r| special::softplus(r).powi(2))
    }

    pub fn shape(&self) -> &[usize] {
        self.mean.shape()
    }

    pub fn bind(&self, g: &mut Graph) -> GaussianVars {
        GaussianVars {
            mean: g.param(self.mean.clone()),
            raw_sigma: g.param(self.raw_sigma.clone()),
        }
    }

    /// Same parameters placed on the graph as constants.
    pub fn bind_frozen(&self, g: &mut Graph) -> GaussianVars {
        GaussianVars {
            mean: g.constant(self.mean.clone()),
            raw_sigma: g.constant(self.raw_sigma.clone()),
        }
    }

    pub fn append_cols(&mut self, extra: usize, mean: impl FnMut(usize, usize) -> f64, sigma: f64) {
        self.mean.append_cols(extra, mean);
        let raw = special::softplus_inv(sigma);
        self.raw_sigma.append_cols(extra, |_, _| raw);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GaussianVars {
    pub mean: Var,
    pub raw_sigma: Var,
}

/// Kumaraswamy stick posteriors with `a = softplus(raw_a)`, `b = softplus(raw_b)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KumaraswamyParams {
    pub raw_a: Tensor,
    pub raw_b: Tensor,
}

impl KumaraswamyParams {
    pub fn new(k: usize, a: f64, b: f64) -> Self {
        Self {
            raw_a: Tensor::full(&[1, k], special::softplus_inv(a)),
            raw_b: Tensor::full(&[1, k], special::softplus_inv(b)),
        }
    }

    pub fn len(&self) -> usize {
        self.raw_a.numel()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn a(&self) -> Tensor {
        self.raw_a.map(special::softplus)
    }

    pub fn b(&self) -> Tensor {
        self.raw_b.map(special::softplus)
    }

    /// `E[ν] = b·B(1 + 1/a, b)` per stick.
    pub fn mean(&self) -> Tensor {
        self.a().zip_map(&self.b(), |a, b| {
            (b.ln() + special::ln_beta(1.0 + 1.0 / a, b)).exp()
        })
    }

    pub fn bind(&self, g: &mut Graph) -> KumaraswamyVars {
        KumaraswamyVars {
            raw_a: g.param(self.raw_a.clone()),
            raw_b: g.param(self.raw_b.clone()),
        }
    }

    pub fn append(&mut self, extra: usize, a: f64, b: f64) {
        let (ra, rb) = (special::softplus_inv(a), special::softplus_inv(b));
        self.raw_a.append_cols(extra, |_, _| ra);
        self.raw_b.append_cols(extra, |_, _| rb);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct KumaraswamyVars {
    pub raw_a: Var,
    pub raw_b: Var,
}

/// Binary Concrete mask posterior: logits `ρ` and temperature `λ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcreteParams {
    pub logits: Tensor,
    pub temperature: f64,
}

/// `μ + softplus(raw_sigma) ⊙ ε`.
pub fn gaussian_sample(g: &mut Graph, p: GaussianVars, eps: &Tensor) -> Result<Var> {
    let sigma = g.softplus(p.raw_sigma);
    let e = g.constant(eps.clone());
    let scaled = g.mul(sigma, e)?;
    Ok(g.add(p.mean, scaled)?)
}

/// Closed-form `KL(N(μ_q, σ_q²) ‖ N(μ_p, σ_p²))` summed over elements.
pub fn gaussian_kl(g: &mut Graph, q: GaussianVars, p_mean: &Tensor, p_var: &Tensor) -> Result<Var> {
    if let Some(&bad) = p_var.data().iter().find(|&&v| !(v > 0.0)) {
        return Err(DistError::NonPositiveVariance(bad));
    }
    let sigma = g.softplus(q.raw_sigma);
    let log_sigma = g.log(sigma)?;
    let var_q = g.mul(sigma, sigma)?;
    let pm = g.constant(p_mean.clone());
    let diff = g.sub(q.mean, pm)?;
    let diff2 = g.mul(diff, diff)?;
    let num = g.add(var_q, diff2)?;
    let two_pv = g.constant(p_var.map(|v| 2.0 * v));
    let ratio = g.div(num, two_pv)?;
    let half_log_pv = g.constant(p_var.map(|v| 0.5 * v.ln() - 0.5));
    let t = g.sub(ratio, log_sigma)?;
    let t = g.add(t, half_log_pv)?;
    Ok(g.sum(t))
}

/// `ln ν` for `ν = (1 - u^{1/b})^{1/a}`, computed in log space.
pub fn kumaraswamy_log_sample(g: &mut Graph, p: KumaraswamyVars, u: &Tensor) -> Result<Var> {
    let a = g.softplus(p.raw_a);
    let b = g.softplus(p.raw_b);
    let log_u = g.constant(u.map(|x| crate::rng::clamp_unit(x).ln()));
    let inner = g.div(log_u, b)?;
    let log1m = g.log1mexp(inner)?;
    Ok(g.div(log1m, a)?)
}

pub fn kumaraswamy_sample(g: &mut Graph, p: KumaraswamyVars, u: &Tensor) -> Result<Var> {
    let log_nu = kumaraswamy_log_sample(g, p, u)?;
    Ok(g.exp(log_nu)?)
}

/// `KL(Kumaraswamy(a, b) ‖ Beta(α, β))` summed over sticks.
///
/// The series over `m` is truncated after [`KUMARASWAMY_SERIES_TERMS`]
/// terms; it vanishes identically when `β = 1`.
pub fn kumaraswamy_beta_kl(
    g: &mut Graph,
    q: KumaraswamyVars,
    prior_alpha: f64,
    prior_beta: f64,
) -> Result<Var> {
    for (name, value) in [("prior alpha", prior_alpha), ("prior beta", prior_beta)] {
        if !(value > 0.0) {
            return Err(DistError::NonPositiveParameter { name, value });
        }
    }
    let a = g.softplus(q.raw_a);
    let b = g.softplus(q.raw_b);
    let k = g.shape(a).to_vec();

    // (a - α)/a · (-γ - Ψ(b) - 1/b)
    let a_minus = g.offset(a, -prior_alpha)?;
    let frac = g.div(a_minus, a)?;
    let psi_b = g.digamma(b)?;
    let one = g.scalar(1.0);
    let inv_b = g.div(one, b)?;
    let bracket = g.add(psi_b, inv_b)?;
    let bracket = g.offset(bracket, EULER_GAMMA)?;
    let bracket = g.neg(bracket);
    let t1 = g.mul(frac, bracket)?;

    // ln(ab) + ln B(α, β) - (b - 1)/b
    let ln_a = g.log(a)?;
    let ln_b = g.log(b)?;
    let ln_ab = g.add(ln_a, ln_b)?;
    let b_minus = g.offset(b, -1.0)?;
    let t3 = g.div(b_minus, b)?;
    let t2 = g.sub(ln_ab, t3)?;
    let t2 = g.offset(t2, special::ln_beta(prior_alpha, prior_beta))?;

    let mut total = g.add(t1, t2)?;

    if prior_beta != 1.0 {
        // (β - 1) b Σ_m B(m/a, b) / (m + ab)
        let ab = g.mul(a, b)?;
        let lg_b = g.ln_gamma(b)?;
        let mut series: Option<Var> = None;
        for m in 1..=KUMARASWAMY_SERIES_TERMS {
            let mf = m as f64;
            let m_const = g_scalar_like(g, mf, &k);
            let m_over_a = g.div(m_const, a)?;
            let lg_ma = g.ln_gamma(m_over_a)?;
            let sum_arg = g.add(m_over_a, b)?;
            let lg_sum = g.ln_gamma(sum_arg)?;
            let lb = g.add(lg_ma, lg_b)?;
            let lb = g.sub(lb, lg_sum)?;
            let beta_fn = g.exp(lb)?;
            let denom = g.offset(ab, mf)?;
            let term = g.div(beta_fn, denom)?;
            series = Some(match series {
                Some(s) => g.add(s, term)?,
                None => term,
            });
        }
        let series = series.expect("at least one term");
        let scaled = g.mul(b, series)?;
        let scaled = g.scale(scaled, prior_beta - 1.0)?;
        total = g.add(total, scaled)?;
    }
    Ok(g.sum(total))
}

fn g_scalar_like(g: &mut Graph, v: f64, shape: &[usize]) -> Var {
    g.constant(Tensor::full(shape, v))
}

/// Binary Concrete reparameterization. Returns the pre-sigmoid sample
/// `Y = (logit_alpha + logit(u)) / λ` and the relaxed mask `σ(Y)`.
pub fn concrete_sample(g: &mut Graph, logit_alpha: Var, temperature: f64, u: &Tensor) -> Result<(Var, Var)> {
    let logistic = g.constant(u.map(|x| special::logit(crate::rng::clamp_unit(x))));
    let shifted = g.add(logit_alpha, logistic)?;
    let y = g.scale(shifted, 1.0 / temperature)?;
    let mask = g.sigmoid(y);
    Ok((y, mask))
}

/// Elementwise log density of the pre-sigmoid Concrete variable `Y`:
/// `ln λ - λY + ln α - 2 ln(1 + exp(-λY + ln α))`.
pub fn concrete_log_density(g: &mut Graph, y: Var, logit_alpha: Var, temperature: f64) -> Result<Var> {
    let ly = g.scale(y, temperature)?;
    let z = g.sub(logit_alpha, ly)?;
    let sp = g.softplus(z);
    let sp2 = g.scale(sp, 2.0)?;
    let d = g.sub(z, sp2)?;
    Ok(g.offset(d, temperature.ln())?)
}

/// Single-sample estimate `Σ ln q(Y) - ln p(Y)` of the relaxed mask KL.
pub fn concrete_kl_mc(
    g: &mut Graph,
    y: Var,
    q_logits: Var,
    p_logits: Var,
    temperature: f64,
) -> Result<Var> {
    let lq = concrete_log_density(g, y, q_logits, temperature)?;
    let lp = concrete_log_density(g, y, p_logits, temperature)?;
    let d = g.sub(lq, lp)?;
    Ok(g.sum(d))
}

/// Scalar convenience wrapper around [`kumaraswamy_beta_kl`].
pub fn kumaraswamy_beta_kl_value(a: f64, b: f64, prior_alpha: f64, prior_beta: f64) -> Result<f64> {
    for (name, value) in [("a", a), ("b", b)] {
        if !(value > 0.0) {
            return Err(DistError::NonPositiveParameter { name, value });
        }
    }
    let mut g = Graph::new();
    let q = KumaraswamyVars {
        raw_a: g.constant(Tensor::row(vec![special::softplus_inv(a)])),
        raw_b: g.constant(Tensor::row(vec![special::softplus_inv(b)])),
    };
    let kl = kumaraswamy_beta_kl(&mut g, q, prior_alpha, prior_beta)?;
    Ok(g.value(kl).item())
}

/// Scalar closed-form Gaussian KL.
pub fn gaussian_kl_value(mq: f64, sq: f64, mp: f64, sp: f64) -> f64 {
    (sp / sq).ln() + (sq * sq + (mq - mp).powi(2)) / (2.0 * sp * sp) - 0.5
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar_gauss(g: &mut Graph, mean: f64, sigma: f64) -> GaussianVars {
        GaussianParams::new(Tensor::scalar(mean), sigma).bind(g)
    }

    fn kuma(g: &mut Graph, a: f64, b: f64) -> KumaraswamyVars {
        KumaraswamyParams::new(1, a, b).bind(g)
    }

    /// Gauss-Legendre nodes and weights on [-1, 1] by Newton iteration.
    fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
        let mut x = vec![0.0; n];
        let mut w = vec![0.0; n];
        for i in 0..n.div_ceil(2) {
            let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (mut p0, mut p1) = (1.0, z);
                for k in 2..=n {
                    let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                    p0 = p1;
                    p1 = p2;
                }
                dp = n as f64 * (z * p1 - p0) / (z * z - 1.0);
                let dz = p1 / dp;
                z -= dz;
                if dz.abs() < 1e-15 {
                    break;
                }
            }
            x[i] = -z;
            x[n - 1 - i] = z;
            w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
            w[n - 1 - i] = w[i];
        }
        (x, w)
    }

    fn integrate(f: impl Fn(f64) -> f64, lo: f64, hi: f64, n: usize) -> f64 {
        let (x, w) = gauss_legendre(n);
        let (c, h) = (0.5 * (lo + hi), 0.5 * (hi - lo));
        x.iter().zip(&w).map(|(&xi, &wi)| wi * f(c + h * xi)).sum::<f64>() * h
    }

    fn kl_quadrature(a: f64, b: f64, alpha: f64, beta: f64) -> f64 {
        let ln_q = |v: f64| (a * b).ln() + (a - 1.0) * v.ln() + (b - 1.0) * (1.0 - v.powf(a)).ln();
        let ln_p = |v: f64| {
            (alpha - 1.0) * v.ln() + (beta - 1.0) * (1.0 - v).ln() - special::ln_beta(alpha, beta)
        };
        integrate(
            |v| {
                let lq = ln_q(v);
                lq.exp() * (lq - ln_p(v))
            },
            0.0,
            1.0,
            10_000,
        )
    }

    #[test]
    fn gaussian_sample_examples() {
        let mut g = Graph::new();
        let p = scalar_gauss(&mut g, 0.0, 1.0);
        let s = gaussian_sample(&mut g, p, &Tensor::scalar(0.0)).unwrap();
        assert_eq!(g.value(s).item(), 0.0);
        let p = scalar_gauss(&mut g, 2.0, 3.0);
        let s = gaussian_sample(&mut g, p, &Tensor::scalar(1.0)).unwrap();
        assert!((g.value(s).item() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn gaussian_sample_rejects_bad_noise_shape() {
        let mut g = Graph::new();
        let p = GaussianParams::new(Tensor::zeros(&[2, 2]), 1.0).bind(&mut g);
        assert!(gaussian_sample(&mut g, p, &Tensor::zeros(&[2, 3])).is_err());
    }

    #[test]
    fn gaussian_sample_mean_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 100_000;
        let eps = crate::rng::normal(&mut rng, 1, n);
        let mut g = Graph::new();
        let p = GaussianParams::new(Tensor::full(&[1, n], 1.5), 2.0).bind(&mut g);
        let s = gaussian_sample(&mut g, p, &eps).unwrap();
        let mean = g.value(s).sum() / n as f64;
        assert!((mean - 1.5).abs() < 3.0 * 2.0 / (n as f64).sqrt());
    }

    #[test]
    fn gaussian_kl_examples() {
        let mut g = Graph::new();
        let q = scalar_gauss(&mut g, 0.7, 0.4);
        let kl = gaussian_kl(&mut g, q, &Tensor::scalar(0.7), &Tensor::scalar(0.16)).unwrap();
        assert!(g.value(kl).item().abs() < 1e-12);

        let q = scalar_gauss(&mut g, 1.0, 1.0);
        let kl = gaussian_kl(&mut g, q, &Tensor::scalar(0.0), &Tensor::scalar(1.0)).unwrap();
        assert!((g.value(kl).item() - 0.5).abs() < 1e-12);

        let q = scalar_gauss(&mut g, 0.0, 2.0);
        let kl = gaussian_kl(&mut g, q, &Tensor::scalar(0.0), &Tensor::scalar(1.0)).unwrap();
        let expected = 2.0 - 0.5 - 2f64.ln();
        assert!((g.value(kl).item() - expected).abs() < 1e-12);
        assert!((expected - 0.80685).abs() < 1e-5);
    }

    #[test]
    fn gaussian_kl_matches_monte_carlo() {
        // E_q[ln q - ln p] for q = N(0, 4), p = N(0, 1)
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 1_000_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let z: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng);
            let x = 2.0 * z;
            let lq = -0.5 * z * z - 2f64.ln();
            let lp = -0.5 * x * x;
            acc += lq - lp;
        }
        let mc = acc / n as f64;
        assert!((mc - gaussian_kl_value(0.0, 2.0, 0.0, 1.0)).abs() < 0.01, "{mc}");
    }

    #[test]
    fn gaussian_kl_rejects_bad_prior() {
        let mut g = Graph::new();
        let q = scalar_gauss(&mut g, 0.0, 1.0);
        assert_eq!(
            gaussian_kl(&mut g, q, &Tensor::scalar(0.0), &Tensor::scalar(0.0)).unwrap_err(),
            DistError::NonPositiveVariance(0.0)
        );
    }

    #[test]
    fn kumaraswamy_sample_examples() {
        let cases = [(1.0, 1.0, 0.25, 0.75), (2.0, 1.0, 0.75, 0.5)];
        for (a, b, u, expected) in cases {
            let mut g = Graph::new();
            let q = kuma(&mut g, a, b);
            let s = kumaraswamy_sample(&mut g, q, &Tensor::row(vec![u])).unwrap();
            assert!((g.value(s).item() - expected).abs() < 1e-12);
        }
        let mut g = Graph::new();
        let q = kuma(&mut g, 2.0, 3.0);
        let s = kumaraswamy_sample(&mut g, q, &Tensor::row(vec![0.5])).unwrap();
        let nu = g.value(s).item();
        assert!((nu - 0.45421).abs() < 1e-5, "{nu}");
        // inverse-CDF property: F(ν) = 1 - (1 - ν^a)^b equals 1 - u
        let cdf = 1.0 - (1.0 - nu.powf(2.0)).powf(3.0);
        assert!((cdf - 0.5).abs() < 1e-12);
    }

    #[test]
    fn kumaraswamy_sample_stays_in_unit_interval() {
        let mut g = Graph::new();
        let q = KumaraswamyParams::new(3, 30.0, 1.0).bind(&mut g);
        let s = kumaraswamy_sample(&mut g, q, &Tensor::row(vec![0.0, 0.5, 1.0])).unwrap();
        assert!(g.value(s).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn kumaraswamy_kl_identity_case() {
        let kl = kumaraswamy_beta_kl_value(2.0, 1.0, 2.0, 1.0).unwrap();
        assert!(kl.abs() < 1e-6, "{kl}");
        let kl = kumaraswamy_beta_kl_value(30.0, 1.0, 30.0, 1.0).unwrap();
        assert!(kl.abs() < 1e-6, "{kl}");
    }

    #[test]
    fn kumaraswamy_kl_matches_quadrature() {
        for (a, b, alpha, beta, tol) in [
            (3.0, 1.0, 2.0, 1.0, 1e-3),
            (2.0, 2.0, 5.0, 1.0, 1e-3),
            (0.8, 1.7, 3.0, 1.0, 1e-3),
            // β = 2 exercises the truncated series; the dropped tail decays like m^{-1-b}
            (1.0, 3.0, 2.0, 2.0, 2e-2),
            (2.0, 3.0, 3.0, 2.0, 2e-2),
        ] {
            let closed = kumaraswamy_beta_kl_value(a, b, alpha, beta).unwrap();
            let quad = kl_quadrature(a, b, alpha, beta);
            assert!((closed - quad).abs() < tol, "({a},{b}) vs Beta({alpha},{beta}): {closed} vs {quad}");
        }
    }

    #[test]
    fn kumaraswamy_kl_rejects_non_positive() {
        assert!(kumaraswamy_beta_kl_value(-1.0, 1.0, 2.0, 1.0).is_err());
        assert!(kumaraswamy_beta_kl_value(1.0, 1.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn concrete_sample_examples() {
        let mut g = Graph::new();
        let la = g.param(Tensor::scalar(0.0));
        for lambda in [0.25, 1.0, 7.0] {
            let (_, b) = concrete_sample(&mut g, la, lambda, &Tensor::scalar(0.5)).unwrap();
            assert_eq!(g.value(b).item(), 0.5);
        }
        let la = g.param(Tensor::scalar(4.0));
        let (_, b) = concrete_sample(&mut g, la, 0.25, &Tensor::scalar(0.5)).unwrap();
        assert!((g.value(b).item() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn hardened_concrete_is_bernoulli() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 100_000;
        let u = crate::rng::uniform(&mut rng, 1, n);
        let mut g = Graph::new();
        let la = g.constant(Tensor::full(&[1, n], special::logit(0.3)));
        let (_, b) = concrete_sample(&mut g, la, 0.25, &u).unwrap();
        let frac = g.value(b).data().iter().filter(|&&v| v > 0.5).count() as f64 / n as f64;
        assert!((frac - 0.3).abs() < 0.01, "{frac}");
    }

    fn log_density(y: f64, la: f64, lambda: f64) -> f64 {
        let mut g = Graph::new();
        let yv = g.constant(Tensor::scalar(y));
        let lv = g.constant(Tensor::scalar(la));
        let d = concrete_log_density(&mut g, yv, lv, lambda).unwrap();
        g.value(d).item()
    }

    #[test]
    fn concrete_log_density_symmetry_point() {
        assert!((log_density(0.0, 0.0, 1.0) + 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!((log_density(0.0, 0.0, 1.0) + 1.38629).abs() < 1e-5);
    }

    #[test]
    fn concrete_density_integrates_to_one() {
        for (la, lambda) in [(0.0, 1.0), (1.0, 0.5), (-2.0, 2.0)] {
            let mass = integrate(|y| log_density(y, la, lambda).exp(), -50.0, 50.0, 4000);
            assert!((mass - 1.0).abs() < 1e-4, "({la},{lambda}): {mass}");
        }
    }

    #[test]
    fn concrete_density_reflection() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let y = rng.random_range(-5.0..5.0);
            let la = rng.random_range(-3.0..3.0);
            let lambda = rng.random_range(0.2..3.0);
            assert!((log_density(y, la, lambda) - log_density(-y, -la, lambda)).abs() < 1e-12);
        }
    }

    /// KL between two binary Concretes with a common temperature equals the KL
    /// between the underlying logistic variables, independent of temperature.
    fn logistic_kl_quadrature(mu_q: f64, mu_p: f64) -> f64 {
        let ln_f = |x: f64, m: f64| -(x - m) - 2.0 * special::softplus(-(x - m));
        integrate(|x| ln_f(x, mu_q).exp() * (ln_f(x, mu_q) - ln_f(x, mu_p)), -60.0, 60.0, 6000)
    }

    fn concrete_kl_average(q: f64, p: f64, lambda: f64, n: usize, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = crate::rng::uniform(&mut rng, 1, n);
        let mut g = Graph::new();
        let ql = g.constant(Tensor::full(&[1, n], q));
        let pl = g.constant(Tensor::full(&[1, n], p));
        let (y, _) = concrete_sample(&mut g, ql, lambda, &u).unwrap();
        let kl = concrete_kl_mc(&mut g, y, ql, pl, lambda).unwrap();
        g.value(kl).item() / n as f64
    }

    #[test]
    fn concrete_kl_zero_when_equal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let u = crate::rng::uniform(&mut rng, 1, 50);
        let mut g = Graph::new();
        let ql = g.constant(Tensor::full(&[1, 50], 1.3));
        let (y, _) = concrete_sample(&mut g, ql, 0.5, &u).unwrap();
        let kl = concrete_kl_mc(&mut g, y, ql, ql, 0.5).unwrap();
        assert_eq!(g.value(kl).item(), 0.0);
    }

    #[test]
    fn concrete_kl_matches_logistic_oracle() {
        let (q, p) = (special::logit(0.8), special::logit(0.2));
        let oracle = logistic_kl_quadrature(q, p);
        for lambda in [0.25, 1.0] {
            let mc = concrete_kl_average(q, p, lambda, 100_000, 17);
            assert!(mc > 0.0 && mc.is_finite());
            assert!((mc - oracle).abs() / oracle < 0.02, "λ={lambda}: {mc} vs {oracle}");
        }
    }

    #[test]
    fn samplers_are_bitwise_reproducible() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(21);
            let u = crate::rng::uniform(&mut rng, 2, 3);
            let mut g = Graph::new();
            let la = g.param(Tensor::from_rows(&[[0.1, -0.3, 2.0], [1.0, 0.0, -1.0]]));
            let (_, b) = concrete_sample(&mut g, la, 0.7, &u).unwrap();
            g.value(b).clone()
        };
        assert_eq!(run(), run());
    }

    fn pathwise_check(build: &dyn Fn(&mut Graph, Var, Var) -> Var, x0: f64, y0: f64) {
        let eval = |x: f64, y: f64| {
            let mut g = Graph::new();
            let a = g.constant(Tensor::row(vec![x]));
            let b = g.constant(Tensor::row(vec![y]));
            let out = build(&mut g, a, b);
            g.value(out).item()
        };
        let mut g = Graph::new();
        let a = g.param(Tensor::row(vec![x0]));
        let b = g.param(Tensor::row(vec![y0]));
        let out = build(&mut g, a, b);
        let grads = g.backward(out).unwrap();
        let h = 1e-5;
        let fa = (eval(x0 + h, y0) - eval(x0 - h, y0)) / (2.0 * h);
        let fb = (eval(x0, y0 + h) - eval(x0, y0 - h)) / (2.0 * h);
        for (an, fd) in [(grads.get(a).unwrap().item(), fa), (grads.get(b).unwrap().item(), fb)] {
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-4);
            assert!(rel < 1e-4, "{an} vs {fd}");
        }
    }

    #[test]
    fn pathwise_gradients_match_finite_differences() {
        let u = Tensor::row(vec![0.37]);
        let eps = Tensor::row(vec![-0.8]);
        pathwise_check(
            &|g, a, b| {
                let s = gaussian_sample(g, GaussianVars { mean: a, raw_sigma: b }, &eps).unwrap();
                g.sum(s)
            },
            0.4,
            -0.2,
        );
        pathwise_check(
            &|g, a, b| {
                let s = kumaraswamy_sample(g, KumaraswamyVars { raw_a: a, raw_b: b }, &u).unwrap();
                g.sum(s)
            },
            1.5,
            0.9,
        );
        pathwise_check(
            &|g, a, b| {
                let (_, m) = concrete_sample(g, a, 0.6, &u).unwrap();
                let s = g.mul(m, b).unwrap();
                g.sum(s)
            },
            0.3,
            1.2,
        );
        pathwise_check(
            &|g, a, b| kumaraswamy_beta_kl(g, KumaraswamyVars { raw_a: a, raw_b: b }, 3.0, 2.0).unwrap(),
            2.0,
            1.1,
        );
    }
}
