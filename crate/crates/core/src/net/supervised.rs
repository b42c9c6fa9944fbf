use rand::Rng;

use super::{
    bind_ibp_layers, compose_loss, dense_forward, dense_kl, dense_params, draw_dense_noise, draw_layer_noise,
    ibp_field_mut, ibp_layer_kls, ibp_stack_forward, split, sum_vars, Binding, BoundDense, DenseLayer, ElboTerms,
    NetError, Objective, ParamId, Pass, Result, SampleNoise, Trainable,
};
use crate::autodiff::{log_sum_exp, Graph, Var};
use crate::cl::prior::{DensePrior, PriorStore};
use crate::ibp::{BoundLayer, IbpLayer, LayerInit};
use crate::tensor::Tensor;

/// Multi-head classifier: a shared IBP-masked ReLU trunk and one Gaussian head per task.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SupervisedModel {
    pub hidden: Vec<IbpLayer>,
    pub heads: Vec<DenseLayer>,
}

/// A model placed on a graph for one task.
#[derive(Debug, Clone)]
pub struct BoundSupervised {
    hidden: Vec<BoundLayer>,
    head: BoundDense,
}

impl SupervisedModel {
    /// Trunk with `widths[l]` columns in layer `l`; no heads yet.
    pub fn new(input_dim: usize, widths: &[usize], init: &LayerInit, rng: &mut impl Rng) -> Self {
        let mut d = input_dim;
        let hidden = widths
            .iter()
            .map(|&k| {
                let l = IbpLayer::new(d, k, init, rng);
                d = k;
                l
            })
            .collect();
        Self {
            hidden,
            heads: Vec::new(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.hidden[0].input_dim()
    }

    /// Width feeding the heads.
    pub fn feature_dim(&self) -> usize {
        self.hidden.last().map_or(0, IbpLayer::truncation)
    }

    /// Adds a head for the next task and returns its task id.
    pub fn add_head(&mut self, classes: usize, init: &LayerInit, rng: &mut impl Rng) -> usize {
        self.heads.push(DenseLayer::new(self.feature_dim(), classes, init, rng));
        self.heads.len() - 1
    }

    pub fn head(&self, task: usize) -> Result<&DenseLayer> {
        self.heads.get(task).ok_or(NetError::UnknownTask(task))
    }

    /// Mutable access to a registered parameter.
    pub fn param_mut(&mut self, id: ParamId) -> Result<&mut Tensor> {
        match id {
            ParamId::Ibp { layer, field } => Ok(ibp_field_mut(&mut self.hidden[layer], field)),
            ParamId::Head { task, field } => self
                .heads
                .get_mut(task)
                .map(|h| h.field_mut(field))
                .ok_or(NetError::UnknownTask(task)),
            ParamId::Dense { .. } => Err(NetError::UnknownParam(id.to_string())),
        }
    }

    /// Places the trunk and head `task` on `g`. The head is trainable whenever
    /// Gaussian parameters are.
    pub fn bind(&self, g: &mut Graph, task: usize, train: Trainable) -> Result<(BoundSupervised, Binding)> {
        let head = self.head(task)?;
        let mut params = Vec::new();
        let hidden = bind_ibp_layers(g, &self.hidden, train, &mut params);
        let head = head.bind(g, train.gaussian);
        if train.gaussian {
            dense_params(&head, |field| ParamId::Head { task, field }, &mut params);
        }
        Ok((BoundSupervised { hidden, head }, Binding { params }))
    }

    /// Draws `samples` noise sets for head `task`.
    pub fn draw_noise(
        &self,
        task: usize,
        stochastic_mask: bool,
        samples: usize,
        mask_rng: &mut impl Rng,
        weight_rng: &mut impl Rng,
    ) -> Result<Vec<SampleNoise>> {
        let head = self.head(task)?;
        Ok((0..samples)
            .map(|_| SampleNoise {
                layers: draw_layer_noise(&self.hidden, stochastic_mask, mask_rng, weight_rng),
                dense: vec![draw_dense_noise(head, weight_rng)],
                latent: None,
            })
            .collect())
    }

    /// Logits `[N, C]` of one forward pass plus that pass's mask KL.
    pub fn logits(
        g: &mut Graph,
        bound: &BoundSupervised,
        x: Var,
        noise: Option<&SampleNoise>,
        pass: Pass<'_>,
    ) -> Result<(Var, Option<Var>)> {
        let (h, mask_kl) = ibp_stack_forward(g, &bound.hidden, 0, x, noise, pass)?;
        let out = dense_forward(g, &bound.head, h, noise.map(|n| &n.dense[0]))?;
        Ok((out, mask_kl))
    }

    /// Negative ELBO on a minibatch. An empty `noise` slice gives one
    /// deterministic pass through the posterior means.
    #[allow(clippy::too_many_arguments)]
    pub fn objective(
        &self,
        g: &mut Graph,
        bound: &BoundSupervised,
        x: &Tensor,
        y: &[usize],
        priors: &PriorStore,
        head_prior: &DensePrior,
        obj: &Objective<'_>,
        noise: &[SampleNoise],
    ) -> Result<ElboTerms> {
        if y.is_empty() || x.rows() == 0 {
            return Err(NetError::EmptyBatch);
        }
        let xv = g.constant(x.clone());
        let mut log_liks = Vec::new();
        let mut mask_kls = Vec::new();
        let passes: Vec<Option<&SampleNoise>> = if noise.is_empty() {
            vec![None]
        } else {
            noise.iter().map(Some).collect()
        };
        for n in passes {
            let (logits, mkl) = Self::logits(g, bound, xv, n, obj.pass)?;
            log_liks.push(g.softmax_log_lik(logits, y)?);
            mask_kls.push(mkl);
        }
        let (kl_gauss, kl_sticks) = if obj.with_kl {
            let stochastic = obj.pass.is_stochastic();
            let mut gauss = Vec::new();
            let mut sticks = Vec::new();
            for (b, p) in bound.hidden.iter().zip(&priors.layers) {
                let (kg, ks) = ibp_layer_kls(g, b, p, stochastic)?;
                gauss.push(kg);
                sticks.extend(ks);
            }
            gauss.push(dense_kl(g, &bound.head, head_prior)?);
            (sum_vars(g, &gauss)?, sum_vars(g, &sticks)?)
        } else {
            (None, None)
        };
        compose_loss(g, &log_liks, &mask_kls, kl_gauss, kl_sticks, obj)
    }

    /// Class probabilities for head `task`, averaged over `samples` weight
    /// draws (`0` uses the posterior means). `pass` must not be stochastic.
    pub fn predict(&self, x: &Tensor, task: usize, pass: Pass<'_>, samples: usize, rng: &mut impl Rng) -> Result<Tensor> {
        if x.rows() == 0 {
            return Err(NetError::EmptyBatch);
        }
        let mut g = Graph::new();
        let (bound, _) = self.bind(&mut g, task, Trainable::NONE)?;
        let xv = g.constant(x.clone());
        let noise = self.draw_noise(task, false, samples, &mut split(rng), rng)?;
        let passes: Vec<Option<&SampleNoise>> = if noise.is_empty() {
            vec![None]
        } else {
            noise.iter().map(Some).collect()
        };
        let c = self.heads[task].output_dim();
        let mut probs = Tensor::zeros(&[x.rows(), c]);
        let weight = 1.0 / passes.len() as f64;
        for n in passes {
            let (logits, _) = Self::logits(&mut g, &bound, xv, n, pass)?;
            let lv = g.value(logits);
            for r in 0..x.rows() {
                let row = &lv.data()[r * c..(r + 1) * c];
                let lse = log_sum_exp(row);
                for (j, &v) in row.iter().enumerate() {
                    let p = probs.get(r, j) + weight * (v - lse).exp();
                    probs.set(r, j, p);
                }
            }
        }
        Ok(probs)
    }
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy(probs: &Tensor, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let c = probs.cols();
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(r, &y)| {
            let row = &probs.data()[r * c..(r + 1) * c];
            let best = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (j, &v)| if v > acc.1 { (j, v) } else { acc });
            best.0 == y
        })
        .count();
    hits as f64 / labels.len() as f64
}

/// Single-call negative ELBO: masked training pass at temperature `λ` with
/// `samples` Monte Carlo draws and the minibatch rescaled to `dataset_size`.
#[allow(clippy::too_many_arguments)]
pub fn supervised_elbo(
    model: &SupervisedModel,
    x: &Tensor,
    y: &[usize],
    task: usize,
    priors: &PriorStore,
    samples: usize,
    temperature: f64,
    dataset_size: usize,
    rng: &mut impl Rng,
) -> Result<f64> {
    if samples == 0 {
        return Err(NetError::EmptyBatch);
    }
    let head = model.head(task)?;
    let head_prior = DensePrior::initial(head.input_dim(), head.output_dim(), priors.sigma0);
    let noise = model.draw_noise(task, true, samples, &mut split(rng), rng)?;
    let mut g = Graph::new();
    let (bound, _) = model.bind(&mut g, task, Trainable::NONE)?;
    let obj = Objective {
        pass: Pass::Stochastic { temperature },
        with_kl: true,
        data_scale: dataset_size as f64 / y.len().max(1) as f64,
    };
    let terms = model.objective(&mut g, &bound, x, y, priors, &head_prior, &obj, &noise)?;
    Ok(g.value(terms.loss).item())
}
