//! Finite-difference checks of the tape gradients: every primitive op, and
//! whole supervised / VAE objectives under frozen noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{AutodiffError, Graph, Var};
use crate::cl::{ClModel, PriorStore};
use crate::data::Dataset;
use crate::ibp::LayerInit;
use crate::net::{NetError, Objective, Pass, SampleNoise, SupervisedModel, Trainable, VaeModel};
use crate::tensor::Tensor;

/// Central-difference step.
pub const STEP: f64 = 1e-5;

/// Worst relative error of one check.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub max_rel_err: f64,
}

/// `|a - n| / max(|a|, |n|, 1e-4)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4)
}

fn central_diff(x: &Tensor, f: &mut dyn FnMut(&Tensor) -> f64) -> Tensor {
    let mut out = x.clone();
    for i in 0..x.numel() {
        let mut xp = x.clone();
        xp.data_mut()[i] += STEP;
        let mut xm = x.clone();
        xm.data_mut()[i] -= STEP;
        out.data_mut()[i] = (f(&xp) - f(&xm)) / (2.0 * STEP);
    }
    out
}

type Build = fn(&mut Graph, &[Var]) -> Result<Var, AutodiffError>;

struct Primitive {
    name: &'static str,
    inputs: &'static [(usize, usize, f64, f64)],
    build: Build,
}

const PRIMITIVES: &[Primitive] = &[
    Primitive { name: "add", inputs: &[(2, 3, -2.0, 2.0), (2, 3, -2.0, 2.0)], build: |g, v| g.add(v[0], v[1]) },
    Primitive { name: "sub", inputs: &[(2, 3, -2.0, 2.0), (2, 3, -2.0, 2.0)], build: |g, v| g.sub(v[0], v[1]) },
    Primitive { name: "mul", inputs: &[(2, 3, -2.0, 2.0), (2, 3, -2.0, 2.0)], build: |g, v| g.mul(v[0], v[1]) },
    Primitive { name: "div", inputs: &[(2, 3, -2.0, 2.0), (2, 3, 0.5, 2.0)], build: |g, v| g.div(v[0], v[1]) },
    Primitive { name: "pow", inputs: &[(2, 3, 0.3, 2.0), (2, 3, -1.5, 1.5)], build: |g, v| g.pow(v[0], v[1]) },
    Primitive { name: "maximum", inputs: &[(2, 3, -2.0, -0.5), (2, 3, 0.5, 2.0)], build: |g, v| g.maximum(v[0], v[1]) },
    Primitive { name: "matmul", inputs: &[(2, 3, -1.0, 1.0), (3, 4, -1.0, 1.0)], build: |g, v| g.matmul(v[0], v[1]) },
    Primitive { name: "scale", inputs: &[(2, 3, -2.0, 2.0)], build: |g, v| g.scale(v[0], -1.7) },
    Primitive { name: "offset", inputs: &[(2, 3, -2.0, 2.0)], build: |g, v| g.offset(v[0], 0.3) },
    Primitive { name: "neg", inputs: &[(2, 3, -2.0, 2.0)], build: |g, v| Ok(g.neg(v[0])) },
    Primitive { name: "exp", inputs: &[(2, 3, -2.0, 2.0)], build: |g, v| g.exp(v[0]) },
    Primitive { name: "log", inputs: &[(2, 3, 0.2, 3.0)], build: |g, v| g.log(v[0]) },
    Primitive { name: "sigmoid", inputs: &[(2, 3, -4.0, 4.0)], build: |g, v| Ok(g.sigmoid(v[0])) },
    Primitive { name: "softplus", inputs: &[(2, 3, -4.0, 4.0)], build: |g, v| Ok(g.softplus(v[0])) },
    Primitive { name: "relu", inputs: &[(2, 3, 0.1, 2.0)], build: |g, v| Ok(g.relu(v[0])) },
    Primitive { name: "log1mexp", inputs: &[(2, 3, -3.0, -0.1)], build: |g, v| g.log1mexp(v[0]) },
    Primitive { name: "ln_gamma", inputs: &[(2, 3, 0.2, 6.0)], build: |g, v| g.ln_gamma(v[0]) },
    Primitive { name: "digamma", inputs: &[(2, 3, 0.3, 6.0)], build: |g, v| g.digamma(v[0]) },
    Primitive { name: "sum", inputs: &[(2, 3, -2.0, 2.0)], build: |g, v| Ok(g.sum(v[0])) },
    Primitive { name: "mean", inputs: &[(2, 3, -2.0, 2.0)], build: |g, v| Ok(g.mean(v[0])) },
    Primitive { name: "broadcast_rows", inputs: &[(1, 3, -2.0, 2.0)], build: |g, v| g.broadcast_rows(v[0], 4) },
    Primitive { name: "col_max", inputs: &[(3, 4, -2.0, 2.0)], build: |g, v| g.col_max(v[0]) },
    Primitive { name: "cumsum_cols", inputs: &[(2, 4, -2.0, 2.0)], build: |g, v| g.cumsum_cols(v[0]) },
    Primitive { name: "softmax_log_lik", inputs: &[(3, 4, -2.0, 2.0)], build: |g, v| g.softmax_log_lik(v[0], &[0, 3, 1]) },
];

/// Scalar `Σ out ⊙ w` with fixed random weights `w`, so every output entry
/// contributes a distinct amount to the checked gradient.
fn project(g: &mut Graph, out: Var, seed: u64) -> Result<Var, AutodiffError> {
    let shape = g.shape(out).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let w = Tensor::new(shape, (0..n).map(|_| rng.random_range(0.5..1.5)).collect())?;
    let w = g.constant(w);
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}

fn check_primitive(p: &Primitive, rng: &mut ChaCha8Rng) -> Result<f64, AutodiffError> {
    let values: Vec<Tensor> = p
        .inputs
        .iter()
        .map(|&(r, c, lo, hi)| Tensor::from_fn(r, c, |_, _| rng.random_range(lo..hi)))
        .collect();
    // col_max needs a unique maximum per column
    let values: Vec<Tensor> = if p.name == "col_max" {
        values.iter().map(|t| Tensor::from_fn(t.rows(), t.cols(), |r, c| t.get(r, c) + 3.0 * r as f64 * (c % 2) as f64)).collect()
    } else {
        values
    };
    let seed = rng.random();
    let eval = |vals: &[Tensor]| -> Result<f64, AutodiffError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.constant(t.clone())).collect();
        let out = (p.build)(&mut g, &vars)?;
        let loss = project(&mut g, out, seed)?;
        Ok(g.value(loss).item())
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = values.iter().map(|t| g.param(t.clone())).collect();
    let out = (p.build)(&mut g, &vars)?;
    let loss = project(&mut g, out, seed)?;
    let grads = g.backward(loss)?;
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*v, values[i].shape());
        let numeric = central_diff(&values[i], &mut |t| {
            let mut vals = values.clone();
            vals[i] = t.clone();
            eval(&vals).unwrap_or(f64::NAN)
        });
        for (a, n) in analytic.data().iter().zip(numeric.data()) {
            worst = worst.max(rel_err(*a, *n));
        }
    }
    Ok(worst)
}

/// One check per primitive op, on random inputs drawn inside its smooth domain.
pub fn primitive_suite(seed: u64) -> Result<Vec<Check>, AutodiffError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    PRIMITIVES
        .iter()
        .map(|p| {
            Ok(Check {
                name: p.name.to_string(),
                max_rel_err: check_primitive(p, &mut rng)?,
            })
        })
        .collect()
}

/// Compares the tape gradient of `model`'s negative ELBO with central
/// differences, for every trainable tensor, with the noise held fixed.
pub fn objective_check<M: ClModel>(
    model: &M,
    task: usize,
    batch: &Dataset,
    priors: &PriorStore,
    obj: &Objective<'_>,
    noise: &[SampleNoise],
) -> Result<f64, NetError> {
    let mut g = Graph::new();
    let (terms, binding) = model.objective(&mut g, task, batch, priors, obj, noise, Trainable::ALL)?;
    let grads = g.backward(terms.loss)?;
    let mut worst: f64 = 0.0;
    for (id, var) in &binding.params {
        let base = g.value(*var).clone();
        let analytic = grads.get_or_zeros(*var, base.shape());
        let numeric = central_diff(&base, &mut |t| {
            let mut m = model.clone();
            *m.param_mut(*id).expect("bound parameter") = t.clone();
            let mut g = Graph::new();
            match m.objective(&mut g, task, batch, priors, obj, noise, Trainable::NONE) {
                Ok((terms, _)) => g.value(terms.loss).item(),
                Err(_) => f64::NAN,
            }
        });
        for (a, n) in analytic.data().iter().zip(numeric.data()) {
            worst = worst.max(rel_err(*a, *n));
        }
    }
    Ok(worst)
}

fn toy_init() -> LayerInit {
    LayerInit {
        mean_std: 0.5,
        sigma: 0.1,
        alpha: 3.0,
    }
}

/// 2-input, 3-unit, 2-class masked net on four points, two frozen samples.
pub fn supervised_check(seed: u64) -> Result<f64, NetError> {
    let init = toy_init();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = SupervisedModel::new(2, &[3], &init, &mut rng);
    let mut priors = PriorStore::initial(model.ibp_layers(), model.shared_dense(), 0.6, init.alpha);
    model.begin_task(0, 2, &init, &mut rng, &mut priors);
    let x = Tensor::from_fn(4, 2, |_, _| rng.random_range(0.0..1.0));
    let batch = Dataset::new(x, vec![0, 1, 1, 0], 2).map_err(|_| NetError::EmptyBatch)?;
    let (mut mask_rng, mut weight_rng) = (ChaCha8Rng::seed_from_u64(seed + 1), ChaCha8Rng::seed_from_u64(seed + 2));
    let noise = ClModel::draw_noise(&model, 0, 4, true, true, 2, &mut mask_rng, &mut weight_rng)?;
    let obj = Objective {
        pass: Pass::Stochastic { temperature: 0.7 },
        with_kl: true,
        data_scale: 3.0,
    };
    objective_check(&model, 0, &batch, &priors, &obj, &noise)
}

/// 4-pixel VAE with one 3-unit masked layer on each side of a 2-d latent.
pub fn vae_check(seed: u64) -> Result<f64, NetError> {
    let init = toy_init();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = VaeModel::new(4, &[3], 2, &[3], &init, &mut rng);
    let mut priors = PriorStore::initial(model.ibp_layers(), model.shared_dense(), 0.6, init.alpha);
    model.begin_task(0, 0, &init, &mut rng, &mut priors);
    let x = Tensor::from_fn(3, 4, |_, _| rng.random_range(0.05..0.95));
    let batch = Dataset::new(x, vec![0; 3], 1).map_err(|_| NetError::EmptyBatch)?;
    let (mut mask_rng, mut weight_rng) = (ChaCha8Rng::seed_from_u64(seed + 1), ChaCha8Rng::seed_from_u64(seed + 2));
    let noise = ClModel::draw_noise(&model, 0, 3, true, true, 2, &mut mask_rng, &mut weight_rng)?;
    let obj = Objective {
        pass: Pass::Stochastic { temperature: 0.7 },
        with_kl: true,
        data_scale: 2.0,
    };
    objective_check(&model, 0, &batch, &priors, &obj, &noise)
}
