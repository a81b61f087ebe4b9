//! Layers and sequential models.

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{batch_moments, Graph, Var};
use crate::tensor::Tensor;

/// Parameter gradients keyed by parameter name.
pub type ParamGrads = BTreeMap<String, Tensor>;

/// Architecture description of a single layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LayerSpec {
    Linear {
        inputs: usize,
        outputs: usize,
    },
    Tanh,
    Relu,
    Softmax,
    BatchNorm {
        features: usize,
        momentum: f64,
        eps: f64,
    },
}

impl LayerSpec {
    pub fn linear(inputs: usize, outputs: usize) -> Self {
        LayerSpec::Linear { inputs, outputs }
    }

    pub fn batch_norm(features: usize) -> Self {
        LayerSpec::BatchNorm {
            features,
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Linear { inputs, outputs } => write!(f, "linear {inputs} {outputs}"),
            LayerSpec::Tanh => write!(f, "tanh"),
            LayerSpec::Relu => write!(f, "relu"),
            LayerSpec::Softmax => write!(f, "softmax"),
            LayerSpec::BatchNorm {
                features,
                momentum,
                eps,
            } => write!(f, "batchnorm {features} {momentum:e} {eps:e}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Linear {
        weight: Tensor,
        bias: Tensor,
    },
    Tanh,
    Relu,
    Softmax,
    BatchNorm {
        gamma: Tensor,
        beta: Tensor,
        running_mean: Tensor,
        running_var: Tensor,
        momentum: f64,
        eps: f64,
    },
}

impl Layer {
    fn init<R: Rng + ?Sized>(spec: &LayerSpec, rng: &mut R) -> Self {
        match *spec {
            LayerSpec::Linear { inputs, outputs } => {
                let bound = 1.0 / (inputs as f64).sqrt();
                Layer::Linear {
                    weight: Tensor::uniform(inputs, outputs, -bound, bound, rng),
                    bias: Tensor::uniform(1, outputs, -bound, bound, rng),
                }
            }
            LayerSpec::Tanh => Layer::Tanh,
            LayerSpec::Relu => Layer::Relu,
            LayerSpec::Softmax => Layer::Softmax,
            LayerSpec::BatchNorm {
                features,
                momentum,
                eps,
            } => Layer::BatchNorm {
                gamma: Tensor::full(&[1, features], 1.0),
                beta: Tensor::zeros(&[1, features]),
                running_mean: Tensor::zeros(&[1, features]),
                running_var: Tensor::full(&[1, features], 1.0),
                momentum,
                eps,
            },
        }
    }

    pub fn spec(&self) -> LayerSpec {
        match self {
            Layer::Linear { weight, .. } => LayerSpec::linear(weight.rows(), weight.cols()),
            Layer::Tanh => LayerSpec::Tanh,
            Layer::Relu => LayerSpec::Relu,
            Layer::Softmax => LayerSpec::Softmax,
            Layer::BatchNorm {
                gamma,
                momentum,
                eps,
                ..
            } => LayerSpec::BatchNorm {
                features: gamma.numel(),
                momentum: *momentum,
                eps: *eps,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A sequential stack of layers with an owned parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    input_dim: usize,
    layers: Vec<Layer>,
    mode: Mode,
}

/// Graph nodes recorded by [`Model::forward_graph`].
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub input: Var,
    pub output: Var,
    /// Output of each layer in order.
    pub layer_outputs: Vec<Var>,
    /// Parameter leaves, in declaration order.
    pub params: Vec<(String, Var)>,
    logits: Option<Var>,
}

impl ForwardTrace {
    /// The input to a final softmax layer, if the model has one.
    pub fn logits(&self) -> Option<Var> {
        self.logits
    }

    /// Collects the gradients of every parameter leaf.
    pub fn param_grads(&self, graph: &Graph, grads: &crate::graph::Gradients) -> ParamGrads {
        self.params
            .iter()
            .map(|(name, v)| {
                let g = grads
                    .get(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(graph.value(*v).shape()));
                (name.clone(), g)
            })
            .collect()
    }
}

impl Model {
    /// Builds a model, checking that consecutive layer widths agree.
    pub fn new<R: Rng + ?Sized>(
        input_dim: usize,
        specs: &[LayerSpec],
        rng: &mut R,
    ) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::Invalid(
                "model input dimension must be positive".into(),
            ));
        }
        let mut width = input_dim;
        for (i, s) in specs.iter().enumerate() {
            match *s {
                LayerSpec::Linear { inputs, outputs } => {
                    if inputs != width || outputs == 0 {
                        return Err(Error::Shape {
                            context: format!("layer {i} ({s})"),
                            expected: vec![width],
                            got: vec![inputs],
                        });
                    }
                    width = outputs;
                }
                LayerSpec::BatchNorm {
                    features,
                    momentum,
                    eps,
                } => {
                    if features != width {
                        return Err(Error::Shape {
                            context: format!("layer {i} ({s})"),
                            expected: vec![width],
                            got: vec![features],
                        });
                    }
                    if !(0.0..=1.0).contains(&momentum) || !(eps > 0.0) {
                        return Err(Error::Invalid(format!("layer {i}: bad batchnorm settings")));
                    }
                }
                _ => {}
            }
        }
        let layers = specs.iter().map(|s| Layer::init(s, rng)).collect();
        Ok(Self {
            input_dim,
            layers,
            mode: Mode::Train,
        })
    }

    /// Builds a model from explicit layers.
    pub fn from_layers(input_dim: usize, layers: Vec<Layer>) -> Result<Self> {
        let specs: Vec<LayerSpec> = layers.iter().map(Layer::spec).collect();
        let mut probe = Model::new(input_dim, &specs, &mut ChaCha8Rng::seed_from_u64(0))?;
        for (slot, layer) in probe.layers.iter_mut().zip(layers) {
            check_layer_shapes(slot, &layer)?;
            *slot = layer;
        }
        Ok(probe)
    }

    /// Multilayer perceptron: `hidden` widths with `activation`, then an
    /// output linear layer and an optional head.
    pub fn mlp<R: Rng + ?Sized>(
        input_dim: usize,
        hidden: &[usize],
        output_dim: usize,
        activation: LayerSpec,
        head: Option<LayerSpec>,
        rng: &mut R,
    ) -> Result<Self> {
        let mut specs = Vec::new();
        let mut w = input_dim;
        for &h in hidden {
            specs.push(LayerSpec::linear(w, h));
            specs.push(activation);
            w = h;
        }
        specs.push(LayerSpec::linear(w, output_dim));
        specs.extend(head);
        Model::new(input_dim, &specs, rng)
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        let mut w = self.input_dim;
        for l in &self.layers {
            if let Layer::Linear { weight, .. } = l {
                w = weight.cols();
            }
        }
        w
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(Layer::spec).collect()
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn ends_with(&self, spec: LayerSpec) -> bool {
        self.layers.last().map(Layer::spec) == Some(spec)
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Named trainable parameters in declaration order.
    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            match l {
                Layer::Linear { weight, bias } => {
                    out.push((format!("{i}.weight"), weight));
                    out.push((format!("{i}.bias"), bias));
                }
                Layer::BatchNorm { gamma, beta, .. } => {
                    out.push((format!("{i}.gamma"), gamma));
                    out.push((format!("{i}.beta"), beta));
                }
                _ => {}
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter_mut().enumerate() {
            match l {
                Layer::Linear { weight, bias } => {
                    out.push((format!("{i}.weight"), weight));
                    out.push((format!("{i}.bias"), bias));
                }
                Layer::BatchNorm { gamma, beta, .. } => {
                    out.push((format!("{i}.gamma"), gamma));
                    out.push((format!("{i}.beta"), beta));
                }
                _ => {}
            }
        }
        out
    }

    /// Non-trainable state (batch-norm running statistics).
    pub fn buffers(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            if let Layer::BatchNorm {
                running_mean,
                running_var,
                ..
            } = l
            {
                out.push((format!("{i}.running_mean"), running_mean));
                out.push((format!("{i}.running_var"), running_var));
            }
        }
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter_mut().enumerate() {
            if let Layer::BatchNorm {
                running_mean,
                running_var,
                ..
            } = l
            {
                out.push((format!("{i}.running_mean"), running_mean));
                out.push((format!("{i}.running_var"), running_var));
            }
        }
        out
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != 2 || x.cols() != self.input_dim {
            return Err(Error::Shape {
                context: format!("model input (layer 0: {})", self.describe_layer(0)),
                expected: vec![x.rows(), self.input_dim],
                got: x.shape().to_vec(),
            });
        }
        Ok(())
    }

    fn describe_layer(&self, i: usize) -> String {
        self.layers
            .get(i)
            .map(|l| l.spec().to_string())
            .unwrap_or_else(|| "identity".into())
    }

    /// Pure forward pass. Does not update batch-norm running statistics.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut h = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            h = match l {
                Layer::Linear { weight, bias } => h
                    .matmul(weight)
                    .and_then(|t| t.add_row(bias))
                    .map_err(|e| layer_error(i, l, e))?,
                Layer::Tanh => h.map(f64::tanh),
                Layer::Relu => h.map(|v| v.max(0.0)),
                Layer::Softmax => h.softmax_rows(),
                Layer::BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                    eps,
                    ..
                } => {
                    let (mean, var) = match self.mode {
                        Mode::Train => batch_moments(&h),
                        Mode::Eval => (running_mean.data().to_vec(), running_var.data().to_vec()),
                    };
                    // Same arithmetic as the graph op so both paths agree bitwise.
                    let mut g = Graph::new();
                    let xv = g.constant(h);
                    let gv = g.constant(gamma.clone());
                    let bv = g.constant(beta.clone());
                    let y = g
                        .batch_norm(xv, gv, bv, *eps, Some((&mean, &var)))
                        .map_err(|e| layer_error(i, l, e))?;
                    g.value(y).clone()
                }
            };
        }
        Ok(h)
    }

    /// Records a forward pass on `graph`, with parameters as differentiable
    /// leaves. In train mode batch-norm running statistics are updated.
    pub fn forward_graph(&mut self, graph: &mut Graph, input: Var) -> Result<ForwardTrace> {
        self.check_input(graph.value(input))?;
        let mode = self.mode;
        let mut h = input;
        let mut layer_outputs = Vec::with_capacity(self.layers.len());
        let mut params = Vec::new();
        for (i, l) in self.layers.iter_mut().enumerate() {
            let spec = l.spec();
            let wrap = |e: Error| Error::Shape {
                context: format!("layer {i} ({spec}): {e}"),
                expected: vec![],
                got: vec![],
            };
            h = match l {
                Layer::Linear { weight, bias } => {
                    let w = graph.param(weight.clone());
                    let b = graph.param(bias.clone());
                    params.push((format!("{i}.weight"), w));
                    params.push((format!("{i}.bias"), b));
                    let xw = graph.matmul(h, w).map_err(wrap)?;
                    graph.add_row(xw, b).map_err(wrap)?
                }
                Layer::Tanh => graph.tanh(h),
                Layer::Relu => graph.relu(h),
                Layer::Softmax => graph.softmax(h),
                Layer::BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                    momentum,
                    eps,
                } => {
                    let gv = graph.param(gamma.clone());
                    let bv = graph.param(beta.clone());
                    params.push((format!("{i}.gamma"), gv));
                    params.push((format!("{i}.beta"), bv));
                    match mode {
                        Mode::Train => {
                            let xv = graph.value(h);
                            let (mean, var) = batch_moments(xv);
                            let n = xv.rows() as f64;
                            let unbiased = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
                            for (j, rm) in running_mean.data_mut().iter_mut().enumerate() {
                                *rm = (1.0 - *momentum) * *rm + *momentum * mean[j];
                            }
                            for (j, rv) in running_var.data_mut().iter_mut().enumerate() {
                                *rv = (1.0 - *momentum) * *rv + *momentum * var[j] * unbiased;
                            }
                            graph.batch_norm(h, gv, bv, *eps, None).map_err(wrap)?
                        }
                        Mode::Eval => {
                            let (m, v) =
                                (running_mean.data().to_vec(), running_var.data().to_vec());
                            graph
                                .batch_norm(h, gv, bv, *eps, Some((&m, &v)))
                                .map_err(wrap)?
                        }
                    }
                }
            };
            layer_outputs.push(h);
        }
        let logits = match self.layers.last() {
            Some(Layer::Softmax) => Some(match layer_outputs.len() {
                1 => input,
                n => layer_outputs[n - 2],
            }),
            _ => None,
        };
        Ok(ForwardTrace {
            input,
            output: h,
            layer_outputs,
            params,
            logits,
        })
    }

    /// Records `d/dx sum(output)` as a differentiable graph expression so that
    /// functions of the input gradient (such as a gradient penalty) can be
    /// backpropagated to the parameters.
    ///
    /// Supported for linear, tanh and relu layers. For row-independent models
    /// row `r` of the result is the gradient of output row `r`.
    pub fn input_gradient_graph(&self, graph: &mut Graph, trace: &ForwardTrace) -> Result<Var> {
        let out_shape = graph.value(trace.output).shape().to_vec();
        let mut upstream = graph.constant(Tensor::full(&out_shape, 1.0));
        let mut param_iter = trace.params.iter();
        let mut linear_weights = Vec::new();
        for l in &self.layers {
            match l {
                Layer::Linear { .. } => {
                    let (_, w) = param_iter.next().expect("weight leaf");
                    param_iter.next();
                    linear_weights.push(Some(*w));
                }
                Layer::BatchNorm { .. } | Layer::Softmax => {
                    return Err(Error::Unsupported(format!(
                        "input gradient through {} layers",
                        l.spec()
                    )))
                }
                _ => linear_weights.push(None),
            }
        }
        for i in (0..self.layers.len()).rev() {
            let layer_in = if i == 0 {
                trace.input
            } else {
                trace.layer_outputs[i - 1]
            };
            let layer_out = trace.layer_outputs[i];
            upstream = match &self.layers[i] {
                Layer::Linear { .. } => {
                    let w = linear_weights[i].expect("linear weight");
                    let wt = graph.transpose(w);
                    graph.matmul(upstream, wt)?
                }
                Layer::Tanh => {
                    let y2 = graph.square(layer_out);
                    let neg = graph.scale(y2, -1.0);
                    let d = graph.add_scalar(neg, 1.0);
                    graph.mul(upstream, d)?
                }
                Layer::Relu => {
                    let mask = graph
                        .value(layer_in)
                        .map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                    graph.mul_const(upstream, mask)?
                }
                _ => unreachable!(),
            };
        }
        Ok(upstream)
    }
}

fn check_layer_shapes(expected: &Layer, given: &Layer) -> Result<()> {
    let pairs: Vec<(&Tensor, &Tensor)> = match (expected, given) {
        (Layer::Linear { weight: a, bias: b }, Layer::Linear { weight: c, bias: d }) => {
            vec![(a, c), (b, d)]
        }
        (
            Layer::BatchNorm {
                gamma: a,
                beta: b,
                running_mean: c,
                running_var: d,
                ..
            },
            Layer::BatchNorm {
                gamma: e,
                beta: f,
                running_mean: g,
                running_var: h,
                ..
            },
        ) => vec![(a, e), (b, f), (c, g), (d, h)],
        _ => vec![],
    };
    for (a, b) in pairs {
        if a.shape() != b.shape() {
            return Err(Error::Shape {
                context: format!("layer {}", expected.spec()),
                expected: a.shape().to_vec(),
                got: b.shape().to_vec(),
            });
        }
    }
    Ok(())
}

fn layer_error(i: usize, l: &Layer, e: Error) -> Error {
    match e {
        Error::Shape { expected, got, .. } => Error::Shape {
            context: format!("layer {i} ({})", l.spec()),
            expected,
            got,
        },
        other => other,
    }
}

/// All-zero gradients keyed like `model`'s parameters.
pub fn zero_grads(model: &Model) -> ParamGrads {
    model
        .params()
        .into_iter()
        .map(|(n, t)| (n, Tensor::zeros(t.shape())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn identity_model() {
        let m = Model::new(2, &[], &mut rng()).unwrap();
        let x = Tensor::matrix(1, 2, vec![0.3, -0.7]).unwrap();
        assert_eq!(m.forward(&x).unwrap(), x);
    }

    #[test]
    fn softmax_head_on_zero_logits() {
        let m = Model::new(2, &[LayerSpec::Softmax], &mut rng()).unwrap();
        let x = Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap();
        assert_eq!(m.forward(&x).unwrap().data(), &[0.5, 0.5]);
    }

    #[test]
    fn identity_linear_with_tanh_head() {
        let layers = vec![
            Layer::Linear {
                weight: Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
                bias: Tensor::zeros(&[1, 2]),
            },
            Layer::Tanh,
        ];
        let m = Model::from_layers(2, layers).unwrap();
        let y = m
            .forward(&Tensor::matrix(1, 2, vec![0.0, 10.0]).unwrap())
            .unwrap();
        assert_eq!(y.data()[0], 0.0);
        assert_eq!(y.data()[1], 10f64.tanh());
        assert!(y.data()[1] > 0.9999999);
    }

    #[test]
    fn shape_mismatch_names_layer() {
        let err = Model::new(3, &[LayerSpec::linear(4, 2)], &mut rng()).unwrap_err();
        assert!(err.to_string().contains("layer 0 (linear 4 2)"), "{err}");
        let m = Model::new(3, &[LayerSpec::linear(3, 2)], &mut rng()).unwrap();
        let err = m.forward(&Tensor::zeros(&[1, 4])).unwrap_err();
        assert!(err.to_string().contains("layer 0"), "{err}");
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let m = Model::new(16, &[LayerSpec::linear(16, 8)], &mut rng()).unwrap();
        for (_, p) in m.params() {
            assert!(p.max_abs() <= 0.25);
        }
        assert_eq!(m.param_count(), 16 * 8 + 8);
    }

    #[test]
    fn graph_and_pure_forward_agree() {
        let mut m = Model::mlp(
            4,
            &[5, 3],
            2,
            LayerSpec::Relu,
            Some(LayerSpec::Softmax),
            &mut rng(),
        )
        .unwrap();
        let x = Tensor::standard_normal(3, 4, &mut rng());
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let tr = m.forward_graph(&mut g, xv).unwrap();
        assert_eq!(g.value(tr.output), &m.forward(&x).unwrap());
    }

    #[test]
    fn eval_mode_is_deterministic_with_batchnorm() {
        let mut m = Model::new(
            3,
            &[
                LayerSpec::linear(3, 4),
                LayerSpec::batch_norm(4),
                LayerSpec::Relu,
            ],
            &mut rng(),
        )
        .unwrap();
        let x = Tensor::standard_normal(8, 3, &mut rng());
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        m.forward_graph(&mut g, xv).unwrap();
        m.set_mode(Mode::Eval);
        let a = m.forward(&x).unwrap();
        let b = m.forward(&x).unwrap();
        assert_eq!(a, b);
        // Running stats moved away from their initial values.
        assert!(m.buffers()[0].1.max_abs() > 0.0);
    }

    #[test]
    fn tanh_head_outputs_bounded() {
        let m = Model::mlp(
            3,
            &[8],
            4,
            LayerSpec::Relu,
            Some(LayerSpec::Tanh),
            &mut rng(),
        )
        .unwrap();
        let x = Tensor::standard_normal(32, 3, &mut rng()).scale(100.0);
        let y = m.forward(&x).unwrap();
        assert!(y.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}
