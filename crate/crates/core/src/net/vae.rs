use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    bind_ibp_layers, compose_loss, dense_forward, dense_kl, dense_params, draw_dense_noise, draw_layer_noise,
    ibp_field_mut, ibp_layer_kls, ibp_stack_forward, split, sum_vars, Binding, BoundDense, DenseLayer, ElboTerms,
    NetError, Objective, ParamId, Pass, Result, SampleNoise, Trainable,
};
use crate::autodiff::{Graph, Var};
use crate::cl::prior::{DensePrior, PriorStore};
use crate::ibp::{BoundLayer, IbpLayer, LayerInit};
use crate::special;
use crate::tensor::Tensor;

/// Index of the latent-mean head in [`VaeModel::dense`].
pub const LATENT_MEAN: usize = 0;
/// Index of the latent raw-σ head.
pub const LATENT_SIGMA: usize = 1;
/// Slot of the output head's draw in [`SampleNoise::dense`].
const HEAD_NOISE: usize = 2;

/// VAE with IBP-masked encoder and decoder trunks, one Bernoulli-logit
/// output head per task and a fixed `N(0, I)` latent prior.
///
/// `layers[..encoder_len]` is the encoder, the rest the decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeModel {
    pub layers: Vec<IbpLayer>,
    pub encoder_len: usize,
    /// Latent mean head and latent raw-σ head, shared by every task.
    pub dense: Vec<DenseLayer>,
    /// Per-task output layers producing pixel logits.
    pub heads: Vec<DenseLayer>,
    input_dim: usize,
}

#[derive(Debug, Clone)]
pub struct BoundVae {
    layers: Vec<BoundLayer>,
    encoder_len: usize,
    dense: Vec<BoundDense>,
    head: BoundDense,
}

impl VaeModel {
    /// Encoder `input → encoder[0] → … → latent`, decoder `latent → decoder[0] → … → input`.
    /// No output heads yet.
    pub fn new(input_dim: usize, encoder: &[usize], latent: usize, decoder: &[usize], init: &LayerInit, rng: &mut impl Rng) -> Self {
        let mut layers = Vec::new();
        let mut d = input_dim;
        for &k in encoder {
            layers.push(IbpLayer::new(d, k, init, rng));
            d = k;
        }
        let enc_out = d;
        d = latent;
        for &k in decoder {
            layers.push(IbpLayer::new(d, k, init, rng));
            d = k;
        }
        let mut sigma_head = DenseLayer::new(enc_out, latent, init, rng);
        // start near unit latent scale: softplus(0.5413) = 1
        sigma_head.bias.mean = Tensor::full(&[1, latent], special::softplus_inv(1.0));
        let dense = vec![DenseLayer::new(enc_out, latent, init, rng), sigma_head];
        Self {
            layers,
            encoder_len: encoder.len(),
            dense,
            heads: Vec::new(),
            input_dim,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    /// Width feeding the output heads.
    pub fn feature_dim(&self) -> usize {
        match self.layers[self.encoder_len..].last() {
            Some(l) => l.truncation(),
            None => self.latent_dim(),
        }
    }

    /// Adds an output head for the next task and returns its task id.
    pub fn add_head(&mut self, init: &LayerInit, rng: &mut impl Rng) -> usize {
        self.heads.push(DenseLayer::new(self.feature_dim(), self.input_dim, init, rng));
        self.heads.len() - 1
    }

    pub fn head(&self, task: usize) -> Result<&DenseLayer> {
        self.heads.get(task).ok_or(NetError::UnknownTask(task))
    }

    pub fn latent_dim(&self) -> usize {
        self.dense[LATENT_MEAN].output_dim()
    }

    pub fn param_mut(&mut self, id: ParamId) -> Result<&mut Tensor> {
        match id {
            ParamId::Ibp { layer, field } => Ok(ibp_field_mut(&mut self.layers[layer], field)),
            ParamId::Dense { index, field } => Ok(self.dense[index].field_mut(field)),
            ParamId::Head { task, field } => match self.heads.get_mut(task) {
                Some(h) => Ok(h.field_mut(field)),
                None => Err(NetError::UnknownTask(task)),
            },
        }
    }

    /// Places the shared layers and output head `task` on `g`.
    pub fn bind(&self, g: &mut Graph, task: usize, train: Trainable) -> Result<(BoundVae, Binding)> {
        let head = self.head(task)?;
        let mut params = Vec::new();
        let layers = bind_ibp_layers(g, &self.layers, train, &mut params);
        let dense = self
            .dense
            .iter()
            .enumerate()
            .map(|(index, d)| {
                let b = d.bind(g, train.gaussian);
                if train.gaussian {
                    dense_params(&b, |field| ParamId::Dense { index, field }, &mut params);
                }
                b
            })
            .collect();
        let head = head.bind(g, train.gaussian);
        if train.gaussian {
            dense_params(&head, |field| ParamId::Head { task, field }, &mut params);
        }
        Ok((
            BoundVae {
                layers,
                encoder_len: self.encoder_len,
                dense,
                head,
            },
            Binding { params },
        ))
    }

    /// Noise for `samples` passes over a batch of `n` rows. Weight noise is
    /// only drawn when `sample_weights` is set; latent noise always is.
    #[allow(clippy::too_many_arguments)]
    pub fn draw_noise(
        &self,
        task: usize,
        n: usize,
        stochastic_mask: bool,
        sample_weights: bool,
        samples: usize,
        mask_rng: &mut impl Rng,
        weight_rng: &mut impl Rng,
    ) -> Result<Vec<SampleNoise>> {
        let head = self.head(task)?;
        Ok((0..samples)
            .map(|_| {
                let (layers, dense) = if sample_weights || stochastic_mask {
                    (
                        draw_layer_noise(&self.layers, stochastic_mask, mask_rng, weight_rng),
                        self.dense
                            .iter()
                            .chain(std::iter::once(head))
                            .map(|d| draw_dense_noise(d, weight_rng))
                            .collect(),
                    )
                } else {
                    (Vec::new(), Vec::new())
                };
                SampleNoise {
                    layers,
                    dense,
                    latent: Some(crate::rng::normal(weight_rng, n, self.latent_dim())),
                }
            })
            .collect())
    }

    /// Per-sample local ELBO `Σ_n (ln p(x_n | z_n) - KL(q(z_n) ‖ N(0, I)))`
    /// and the pass's mask KL.
    pub fn local_elbo(
        g: &mut Graph,
        bound: &BoundVae,
        x: Var,
        x_data: &Tensor,
        noise: &SampleNoise,
        pass: Pass<'_>,
    ) -> Result<(Var, Option<Var>)> {
        let weights = (!noise.layers.is_empty()).then_some(noise);
        let dense_eps = |i: usize| weights.map(|n| &n.dense[i]);
        let enc = &bound.layers[..bound.encoder_len];
        let dec = &bound.layers[bound.encoder_len..];
        let (h, kl_enc) = ibp_stack_forward(g, enc, 0, x, weights, pass)?;
        let mu = dense_forward(g, &bound.dense[LATENT_MEAN], h, dense_eps(LATENT_MEAN))?;
        let raw = dense_forward(g, &bound.dense[LATENT_SIGMA], h, dense_eps(LATENT_SIGMA))?;
        let sigma = g.softplus(raw);
        let eps = noise.latent.as_ref().ok_or(NetError::EmptyBatch)?;
        let e = g.constant(eps.clone());
        let se = g.mul(sigma, e)?;
        let z = g.add(mu, se)?;

        let (hd, kl_dec) = ibp_stack_forward(g, dec, bound.encoder_len, z, weights, pass)?;
        let logits = dense_forward(g, &bound.head, hd, dense_eps(HEAD_NOISE))?;
        let recon = bernoulli_log_lik(g, logits, x_data)?;

        let latent_kl = standard_normal_kl(g, mu, sigma)?;
        let local = g.sub(recon, latent_kl)?;
        let mask_kl = match (kl_enc, kl_dec) {
            (Some(a), Some(b)) => Some(g.add(a, b)?),
            (a, b) => a.or(b),
        };
        Ok((local, mask_kl))
    }

    /// Negative ELBO on a minibatch; `priors.dense` covers the shared latent
    /// heads and `head_prior` the bound output head.
    #[allow(clippy::too_many_arguments)]
    pub fn objective(
        &self,
        g: &mut Graph,
        bound: &BoundVae,
        x: &Tensor,
        priors: &PriorStore,
        head_prior: &DensePrior,
        obj: &Objective<'_>,
        noise: &[SampleNoise],
    ) -> Result<ElboTerms> {
        check_pixels(x)?;
        if noise.is_empty() {
            return Err(NetError::EmptyBatch);
        }
        let xv = g.constant(x.clone());
        let mut locals = Vec::new();
        let mut mask_kls = Vec::new();
        for n in noise {
            let (l, m) = Self::local_elbo(g, bound, xv, x, n, obj.pass)?;
            locals.push(l);
            mask_kls.push(m);
        }
        let (kl_gauss, kl_sticks) = if obj.with_kl {
            let stochastic = obj.pass.is_stochastic();
            let mut gauss = Vec::new();
            let mut sticks = Vec::new();
            for (b, p) in bound.layers.iter().zip(&priors.layers) {
                let (kg, ks) = ibp_layer_kls(g, b, p, stochastic)?;
                gauss.push(kg);
                sticks.extend(ks);
            }
            for (b, p) in bound.dense.iter().zip(&priors.dense) {
                gauss.push(dense_kl(g, b, p)?);
            }
            gauss.push(dense_kl(g, &bound.head, head_prior)?);
            (sum_vars(g, &gauss)?, sum_vars(g, &sticks)?)
        } else {
            (None, None)
        };
        compose_loss(g, &locals, &mask_kls, kl_gauss, kl_sticks, obj)
    }

    /// Mean per-example local ELBO under a frozen pass, posterior-mean
    /// weights and `samples` latent draws, decoding through head `task`.
    pub fn held_out_elbo(&self, x: &Tensor, task: usize, pass: Pass<'_>, samples: usize, rng: &mut impl Rng) -> Result<f64> {
        check_pixels(x)?;
        if x.rows() == 0 || samples == 0 {
            return Err(NetError::EmptyBatch);
        }
        let mut g = Graph::new();
        let (bound, _) = self.bind(&mut g, task, Trainable::NONE)?;
        let xv = g.constant(x.clone());
        let noise = self.draw_noise(task, x.rows(), false, false, samples, &mut split(rng), rng)?;
        let mut total = 0.0;
        for n in &noise {
            let (l, _) = Self::local_elbo(&mut g, &bound, xv, x, n, pass)?;
            total += g.value(l).item();
        }
        Ok(total / (samples * x.rows()) as f64)
    }

    /// Decoder pixel means for latent codes `z` through head `task` under a frozen pass.
    pub fn decode(&self, z: &Tensor, task: usize, pass: Pass<'_>) -> Result<Tensor> {
        let mut g = Graph::new();
        let (bound, _) = self.bind(&mut g, task, Trainable::NONE)?;
        let zv = g.constant(z.clone());
        let (hd, _) = ibp_stack_forward(&mut g, &bound.layers[bound.encoder_len..], bound.encoder_len, zv, None, pass)?;
        let logits = dense_forward(&mut g, &bound.head, hd, None)?;
        Ok(g.value(logits).map(special::sigmoid))
    }
}

/// `Σ x ln σ(l) + (1 - x) ln(1 - σ(l)) = Σ x l - softplus(l)`.
pub fn bernoulli_log_lik(g: &mut Graph, logits: Var, x: &Tensor) -> Result<Var> {
    let xc = g.constant(x.clone());
    let xl = g.mul(xc, logits)?;
    let sp = g.softplus(logits);
    let d = g.sub(xl, sp)?;
    Ok(g.sum(d))
}

fn standard_normal_kl(g: &mut Graph, mu: Var, sigma: Var) -> Result<Var> {
    let s2 = g.mul(sigma, sigma)?;
    let m2 = g.mul(mu, mu)?;
    let t = g.add(s2, m2)?;
    let t = g.offset(t, -1.0)?;
    let t = g.scale(t, 0.5)?;
    let ls = g.log(sigma)?;
    let t = g.sub(t, ls)?;
    Ok(g.sum(t))
}

fn check_pixels(x: &Tensor) -> Result<()> {
    match x.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        Some(&bad) => Err(NetError::PixelRange(bad)),
        None => Ok(()),
    }
}

/// Single-call negative ELBO for head `task` with stochastic masks at
/// temperature `λ`. The head's prior is the initial `N(0, σ₀²)`.
#[allow(clippy::too_many_arguments)]
pub fn vae_elbo(
    model: &VaeModel,
    x: &Tensor,
    task: usize,
    priors: &PriorStore,
    samples: usize,
    temperature: f64,
    dataset_size: usize,
    rng: &mut impl Rng,
) -> Result<f64> {
    let noise = model.draw_noise(task, x.rows(), true, true, samples, &mut split(rng), rng)?;
    let head = model.head(task)?;
    let head_prior = DensePrior::initial(head.input_dim(), head.output_dim(), priors.sigma0);
    let mut g = Graph::new();
    let (bound, _) = model.bind(&mut g, task, Trainable::NONE)?;
    let obj = Objective {
        pass: Pass::Stochastic { temperature },
        with_kl: true,
        data_scale: dataset_size as f64 / x.rows().max(1) as f64,
    };
    let terms = model.objective(&mut g, &bound, x, priors, &head_prior, &obj, &noise)?;
    Ok(g.value(terms.loss).item())
}

/// `n` images from `z ~ N(0, I)` decoded through head `task` under the frozen `masks`.
pub fn vae_generate(model: &VaeModel, task: usize, masks: &[Tensor], n: usize, rng: &mut impl Rng) -> Result<Tensor> {
    if masks.len() != model.layers.len() {
        return Err(NetError::MissingMask(masks.len()));
    }
    let z = crate::rng::normal(rng, n, model.latent_dim());
    model.decode(&z, task, Pass::Frozen(masks))
}
