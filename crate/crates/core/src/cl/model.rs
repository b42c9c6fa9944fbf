//! The interface the trainer needs from a model.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::cl::prior::{DensePrior, PriorStore};
use crate::data::Dataset;
use crate::ibp::{IbpLayer, LayerInit};
use crate::net::{
    accuracy, Binding, DenseLayer, ElboTerms, NetError, Objective, ParamId, Pass, SampleNoise, SupervisedModel,
    Trainable, VaeModel, LATENT_MEAN, LATENT_SIGMA,
};
use crate::tensor::Tensor;

type Result<T> = std::result::Result<T, NetError>;

/// A model trainable by [`crate::cl::trainer`].
pub trait ClModel: Clone + Send + Sync {
    fn ibp_layers(&self) -> &[IbpLayer];
    fn ibp_layers_mut(&mut self) -> &mut [IbpLayer];
    /// Unmasked layers shared by every task.
    fn shared_dense(&self) -> &[DenseLayer];
    /// Task-specific heads, in task order.
    fn heads(&self) -> &[DenseLayer];
    /// Prepares task `task` (adds its head if the model has heads) and
    /// registers the matching `p₀` head prior.
    fn begin_task(&mut self, task: usize, classes: usize, init: &LayerInit, rng: &mut ChaCha8Rng, priors: &mut PriorStore);
    fn param_mut(&mut self, id: ParamId) -> Result<&mut Tensor>;
    /// `samples` noise sets for a batch of `rows`. An empty result means a
    /// single deterministic pass.
    #[allow(clippy::too_many_arguments)]
    fn draw_noise(
        &self,
        task: usize,
        rows: usize,
        stochastic: bool,
        sample_weights: bool,
        samples: usize,
        mask_rng: &mut ChaCha8Rng,
        weight_rng: &mut ChaCha8Rng,
    ) -> Result<Vec<SampleNoise>>;
    #[allow(clippy::too_many_arguments)]
    fn objective(
        &self,
        g: &mut Graph,
        task: usize,
        batch: &Dataset,
        priors: &PriorStore,
        obj: &Objective<'_>,
        noise: &[SampleNoise],
        train: Trainable,
    ) -> Result<(ElboTerms, Binding)>;
    /// Layer `layer` gained `extra` columns: grows whatever consumes its output.
    fn grow_consumers(&mut self, layer: usize, extra: usize, init: &LayerInit, rng: &mut ChaCha8Rng, priors: &mut PriorStore);
    /// Task score on `data`: accuracy for classifiers, mean held-out ELBO for VAEs.
    fn evaluate(&self, task: usize, data: &Dataset, pass: Pass<'_>, samples: usize, rng: &mut ChaCha8Rng) -> Result<f64>;
}

impl ClModel for SupervisedModel {
    fn ibp_layers(&self) -> &[IbpLayer] {
        &self.hidden
    }

    fn ibp_layers_mut(&mut self) -> &mut [IbpLayer] {
        &mut self.hidden
    }

    fn shared_dense(&self) -> &[DenseLayer] {
        &[]
    }

    fn heads(&self) -> &[DenseLayer] {
        &self.heads
    }

    fn begin_task(&mut self, task: usize, classes: usize, init: &LayerInit, rng: &mut ChaCha8Rng, priors: &mut PriorStore) {
        while self.heads.len() <= task {
            self.add_head(classes, init, rng);
        }
        while priors.heads.len() < self.heads.len() {
            let h = &self.heads[priors.heads.len()];
            priors
                .heads
                .push(DensePrior::initial(h.input_dim(), h.output_dim(), priors.sigma0));
        }
    }

    fn param_mut(&mut self, id: ParamId) -> Result<&mut Tensor> {
        SupervisedModel::param_mut(self, id)
    }

    fn draw_noise(
        &self,
        task: usize,
        _rows: usize,
        stochastic: bool,
        sample_weights: bool,
        samples: usize,
        mask_rng: &mut ChaCha8Rng,
        weight_rng: &mut ChaCha8Rng,
    ) -> Result<Vec<SampleNoise>> {
        if !stochastic && !sample_weights {
            return Ok(Vec::new());
        }
        SupervisedModel::draw_noise(self, task, stochastic, samples, mask_rng, weight_rng)
    }

    fn objective(
        &self,
        g: &mut Graph,
        task: usize,
        batch: &Dataset,
        priors: &PriorStore,
        obj: &Objective<'_>,
        noise: &[SampleNoise],
        train: Trainable,
    ) -> Result<(ElboTerms, Binding)> {
        let (bound, binding) = self.bind(g, task, train)?;
        let head_prior = priors.heads.get(task).ok_or(NetError::UnknownTask(task))?;
        let terms = SupervisedModel::objective(self, g, &bound, &batch.inputs, &batch.labels, priors, head_prior, obj, noise)?;
        Ok((terms, binding))
    }

    fn grow_consumers(&mut self, layer: usize, extra: usize, init: &LayerInit, rng: &mut ChaCha8Rng, priors: &mut PriorStore) {
        if layer + 1 < self.hidden.len() {
            self.hidden[layer + 1].append_inputs(extra, init, rng);
            let next = &self.hidden[layer + 1];
            priors.pad_layer(layer + 1, next.input_dim(), next.truncation());
        } else {
            for h in &mut self.heads {
                h.append_inputs(extra, init.sigma);
            }
            priors.pad_head_rows(self.feature_dim());
        }
    }

    fn evaluate(&self, task: usize, data: &Dataset, pass: Pass<'_>, samples: usize, rng: &mut ChaCha8Rng) -> Result<f64> {
        let probs = self.predict(&data.inputs, task, pass, samples, rng)?;
        Ok(accuracy(&probs, &data.labels))
    }
}

impl ClModel for VaeModel {
    fn ibp_layers(&self) -> &[IbpLayer] {
        &self.layers
    }

    fn ibp_layers_mut(&mut self) -> &mut [IbpLayer] {
        &mut self.layers
    }

    fn shared_dense(&self) -> &[DenseLayer] {
        &self.dense
    }

    fn heads(&self) -> &[DenseLayer] {
        &self.heads
    }

    fn begin_task(&mut self, task: usize, _: usize, init: &LayerInit, rng: &mut ChaCha8Rng, priors: &mut PriorStore) {
        while self.heads.len() <= task {
            self.add_head(init, rng);
        }
        while priors.heads.len() < self.heads.len() {
            let h = &self.heads[priors.heads.len()];
            priors
                .heads
                .push(DensePrior::initial(h.input_dim(), h.output_dim(), priors.sigma0));
        }
    }

    fn param_mut(&mut self, id: ParamId) -> Result<&mut Tensor> {
        VaeModel::param_mut(self, id)
    }

    fn draw_noise(
        &self,
        task: usize,
        rows: usize,
        stochastic: bool,
        sample_weights: bool,
        samples: usize,
        mask_rng: &mut ChaCha8Rng,
        weight_rng: &mut ChaCha8Rng,
    ) -> Result<Vec<SampleNoise>> {
        VaeModel::draw_noise(self, task, rows, stochastic, sample_weights, samples.max(1), mask_rng, weight_rng)
    }

    fn objective(
        &self,
        g: &mut Graph,
        task: usize,
        batch: &Dataset,
        priors: &PriorStore,
        obj: &Objective<'_>,
        noise: &[SampleNoise],
        train: Trainable,
    ) -> Result<(ElboTerms, Binding)> {
        let (bound, binding) = self.bind(g, task, train)?;
        let head_prior = priors.heads.get(task).ok_or(NetError::UnknownTask(task))?;
        let terms = VaeModel::objective(self, g, &bound, &batch.inputs, priors, head_prior, obj, noise)?;
        Ok((terms, binding))
    }

    fn grow_consumers(&mut self, layer: usize, extra: usize, init: &LayerInit, rng: &mut ChaCha8Rng, priors: &mut PriorStore) {
        if layer + 1 == self.encoder_len {
            for i in [LATENT_MEAN, LATENT_SIGMA] {
                self.dense[i].append_inputs(extra, init.sigma);
                priors.pad_dense_rows(i, self.dense[i].input_dim());
            }
        } else if layer + 1 == self.layers.len() {
            for h in &mut self.heads {
                h.append_inputs(extra, init.sigma);
            }
            priors.pad_head_rows(self.feature_dim());
        } else {
            self.layers[layer + 1].append_inputs(extra, init, rng);
            let next = &self.layers[layer + 1];
            priors.pad_layer(layer + 1, next.input_dim(), next.truncation());
        }
    }

    fn evaluate(&self, task: usize, data: &Dataset, pass: Pass<'_>, samples: usize, rng: &mut ChaCha8Rng) -> Result<f64> {
        self.held_out_elbo(&data.inputs, task, pass, samples.max(1), rng)
    }
}
