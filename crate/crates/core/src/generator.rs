//! Query generator: latent noise in, inputs in `[-1, 1]^d` out.
//!
//! The final layer is always `tanh`, and the activation feeding it (the
//! pre-activation `x_p`) is exposed so gradient estimates can be taken in the
//! unbounded space and injected there.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{ForwardTrace, LayerSpec, Model, ParamGrads};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    model: Model,
}

/// A generator forward pass recorded on a graph.
#[derive(Debug, Clone)]
pub struct GeneratorTrace {
    pub trace: ForwardTrace,
    pub pre_activation: Var,
    pub output: Var,
}

impl Generator {
    /// `latent -> [linear -> batchnorm -> relu]* -> linear -> tanh`.
    pub fn new<R: Rng + ?Sized>(
        latent_dim: usize,
        hidden: &[usize],
        output_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut specs = Vec::new();
        let mut w = latent_dim;
        for &h in hidden {
            specs.push(LayerSpec::linear(w, h));
            specs.push(LayerSpec::batch_norm(h));
            specs.push(LayerSpec::Relu);
            w = h;
        }
        specs.push(LayerSpec::linear(w, output_dim));
        specs.push(LayerSpec::Tanh);
        Self::from_model(Model::new(latent_dim, &specs, rng)?)
    }

    pub fn from_model(model: Model) -> Result<Self> {
        if model.layers().len() < 2 || !model.ends_with(LayerSpec::Tanh) {
            return Err(Error::Invalid(
                "generator needs at least one layer before a final tanh".into(),
            ));
        }
        Ok(Self { model })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut Model {
        &mut self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn latent_dim(&self) -> usize {
        self.model.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.model.output_dim()
    }

    /// Generated queries `tanh(x_p)`.
    pub fn generate(&self, z: &Tensor) -> Result<Tensor> {
        self.model.forward(z)
    }

    /// Records `z -> x_p -> x` on `graph` (updating batch-norm statistics in
    /// train mode).
    pub fn record(&mut self, graph: &mut Graph, z: &Tensor) -> Result<GeneratorTrace> {
        let zv = graph.constant(z.clone());
        let trace = self.model.forward_graph(graph, zv)?;
        let n = trace.layer_outputs.len();
        Ok(GeneratorTrace {
            pre_activation: trace.layer_outputs[n - 2],
            output: trace.output,
            trace,
        })
    }
}

/// Seeds the backward pass at `x_p` with `ghat` and returns the resulting
/// generator parameter gradients, i.e. `ghat x d(x_p)/d(theta_G)`.
pub fn inject_and_backprop(
    graph: &Graph,
    gen: &GeneratorTrace,
    ghat: &Tensor,
) -> Result<ParamGrads> {
    let xp_shape = graph.value(gen.pre_activation).shape();
    if ghat.shape() != xp_shape {
        return Err(Error::Shape {
            context: "gradient injection at the generator pre-activation".into(),
            expected: xp_shape.to_vec(),
            got: ghat.shape().to_vec(),
        });
    }
    let grads = graph.backward_with_seed(gen.pre_activation, ghat.clone())?;
    Ok(gen.trace.param_grads(graph, &grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Layer;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_linear_layer_outer_product() {
        let w = Tensor::matrix(3, 2, vec![0.1, -0.2, 0.3, 0.0, 0.5, 0.7]).unwrap();
        let model = Model::from_layers(
            3,
            vec![
                Layer::Linear {
                    weight: w,
                    bias: Tensor::zeros(&[1, 2]),
                },
                Layer::Tanh,
            ],
        )
        .unwrap();
        let mut gen = Generator::from_model(model).unwrap();
        let z = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.0]).unwrap();
        let ghat = Tensor::matrix(2, 2, vec![0.5, -1.0, 2.0, 0.25]).unwrap();
        let mut g = Graph::new();
        let tr = gen.record(&mut g, &z).unwrap();
        let grads = inject_and_backprop(&g, &tr, &ghat).unwrap();
        // x_p = z W, so dW = z^T ghat.
        assert_eq!(grads["0.weight"], z.transpose().matmul(&ghat).unwrap());
        assert_eq!(grads["0.bias"], ghat.sum_cols());
    }

    #[test]
    fn zero_injection_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut gen = Generator::new(4, &[8], 5, &mut rng).unwrap();
        let z = Tensor::standard_normal(6, 4, &mut rng);
        let mut g = Graph::new();
        let tr = gen.record(&mut g, &z).unwrap();
        let grads = inject_and_backprop(&g, &tr, &Tensor::zeros(&[6, 5])).unwrap();
        assert!(grads.values().all(|t| t.max_abs() == 0.0));
        assert!(inject_and_backprop(&g, &tr, &Tensor::zeros(&[6, 4])).is_err());
    }

    #[test]
    fn requires_tanh_head() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = Model::mlp(4, &[8], 5, LayerSpec::Relu, None, &mut rng).unwrap();
        assert!(Generator::from_model(m).is_err());
    }
}
