use rand::distr::{Distribution, Uniform};

use super::Descriptor;
use crate::error::{Error, Result};
use crate::rng::seeded;
use crate::scalar::Scalar;
use crate::tensor::{
    conv2d_backward, conv2d_forward, dense_backward, dense_forward, flatten_backward,
    flatten_forward, relu_backward, relu_forward, sgd_step, LayerKind, LayerState, Tensor,
};

#[derive(Debug, Clone)]
struct Node<T> {
    name: String,
    kind: LayerKind,
    inputs: Vec<usize>,
    /// Channel width contributed by each inbound edge, for splitting
    /// gradients of merged inputs.
    input_widths: Vec<usize>,
    state: Option<LayerState<T>>,
    cached_input: Option<Tensor<T>>,
}

/// A compiled descriptor: layers in topological order with their parameters.
///
/// Owned by one worker at a time; forward caches the inputs that backward
/// needs.
#[derive(Debug, Clone)]
pub struct Network<T> {
    nodes: Vec<Node<T>>,
    input_shape: [usize; 3],
    output_shape: Vec<usize>,
}

/// Compiles a valid descriptor for inputs of shape `[C, H, W]`.
///
/// Weights are drawn uniformly from `[-sqrt(1/fan_in), sqrt(1/fan_in)]` in
/// topological order from a generator seeded by `seed`; biases start at zero.
pub fn compile<T: Scalar>(
    desc: &Descriptor,
    input_shape: [usize; 3],
    seed: u64,
) -> Result<Network<T>> {
    let shapes = desc.infer_shapes(input_shape)?;
    let position = |name: &str| shapes.iter().position(|(n, _)| n == name);
    let mut rng = seeded(seed);
    let mut nodes = Vec::with_capacity(shapes.len());
    for (name, _) in &shapes {
        let kind = desc.layer(name).expect("inferred layers exist").kind;
        let inputs: Vec<usize> = desc
            .connections()
            .iter()
            .filter(|(_, to)| to == name)
            .map(|(from, _)| position(from).expect("validated edge"))
            .collect();
        let input_widths = inputs.iter().map(|&j| shapes[j].1[0]).collect();
        let state = match kind.parameter_shapes() {
            Some((w_shape, b_shape)) => {
                let bound = (1.0 / kind.fan_in() as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound)
                    .map_err(|e| Error::Compile(format!("weight init for `{name}`: {e}")))?;
                let weights = Tensor::from_fn(&w_shape, |_| T::of(dist.sample(&mut rng)))?;
                Some(LayerState::new(weights, Tensor::zeros(&b_shape)?)?)
            }
            None => None,
        };
        nodes.push(Node {
            name: name.clone(),
            kind,
            inputs,
            input_widths,
            state,
            cached_input: None,
        });
    }
    Ok(Network {
        nodes,
        input_shape,
        output_shape: shapes.last().expect("non-empty").1.clone(),
    })
}

impl<T: Scalar> Network<T> {
    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    /// Per-example output shape of the sink layer.
    pub fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }

    /// Layer names in execution order.
    pub fn layer_names(&self) -> impl Iterator<Item = &str> {
        self.nodes.iter().map(|n| n.name.as_str())
    }

    pub fn states(&self) -> impl Iterator<Item = &LayerState<T>> {
        self.nodes.iter().filter_map(|n| n.state.as_ref())
    }

    pub fn states_mut(&mut self) -> impl Iterator<Item = &mut LayerState<T>> {
        self.nodes.iter_mut().filter_map(|n| n.state.as_mut())
    }

    pub fn parameter_count(&self) -> usize {
        self.states().map(LayerState::parameter_count).sum()
    }

    /// Runs every layer in topological order on a `[N, C, H, W]` batch.
    pub fn forward(&mut self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let s = input.shape();
        if s.len() != 4 || s[1..] != self.input_shape {
            return Err(Error::Shape(format!(
                "network expects [N, {}, {}, {}] input, got {s:?}",
                self.input_shape[0], self.input_shape[1], self.input_shape[2]
            )));
        }
        let mut outputs: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        for i in 0..self.nodes.len() {
            let layer_input = {
                let node = &self.nodes[i];
                match node.inputs.as_slice() {
                    [] => input.clone(),
                    [j] => outputs[*j].clone().expect("topological order"),
                    many => {
                        let parts: Vec<&Tensor<T>> = many
                            .iter()
                            .map(|&j| outputs[j].as_ref().expect("topological order"))
                            .collect();
                        Tensor::concat_channels(&parts)?
                    }
                }
            };
            let node = &mut self.nodes[i];
            let out = match node.kind {
                LayerKind::Conv2d { .. } => {
                    conv2d_forward(&layer_input, node.state.as_ref().expect("trainable"))?
                }
                LayerKind::Dense { .. } => {
                    dense_forward(&layer_input, node.state.as_ref().expect("trainable"))?
                }
                LayerKind::ReLU => relu_forward(&layer_input),
                LayerKind::Flatten => flatten_forward(&layer_input)?,
                LayerKind::SoftmaxCrossEntropy => layer_input.clone(),
            };
            node.cached_input = Some(layer_input);
            outputs[i] = Some(out);
        }
        Ok(outputs.pop().flatten().expect("sink output"))
    }

    /// Backpropagates the gradient of the loss with respect to the network
    /// output. Overwrites every layer's parameter gradients and returns the
    /// gradient with respect to the network input.
    pub fn backward(&mut self, output_grad: &Tensor<T>) -> Result<Tensor<T>> {
        let count = self.nodes.len();
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; count];
        grads[count - 1] = Some(output_grad.clone());
        let mut input_grad: Option<Tensor<T>> = None;
        for i in (0..count).rev() {
            let upstream = grads[i].take().ok_or_else(|| {
                Error::Usage(format!("no gradient reached `{}`", self.nodes[i].name))
            })?;
            let node = &mut self.nodes[i];
            let cached = node.cached_input.as_ref();
            let missing = || Error::Usage(format!("backward before forward at `{}`", node.name));
            let grad_in = match node.kind {
                LayerKind::Conv2d { .. } => {
                    conv2d_backward(&upstream, cached, node.state.as_mut().expect("trainable"))?
                }
                LayerKind::Dense { .. } => {
                    dense_backward(&upstream, cached, node.state.as_mut().expect("trainable"))?
                }
                LayerKind::ReLU => relu_backward(&upstream, cached.ok_or_else(missing)?)?,
                LayerKind::Flatten => {
                    flatten_backward(&upstream, cached.ok_or_else(missing)?.shape())?
                }
                LayerKind::SoftmaxCrossEntropy => upstream,
            };
            let inputs = node.inputs.clone();
            match inputs.as_slice() {
                [] => accumulate(&mut input_grad, grad_in)?,
                [j] => accumulate(&mut grads[*j], grad_in)?,
                many => {
                    let parts = grad_in.split_channels(&self.nodes[i].input_widths)?;
                    for (&j, part) in many.iter().zip(parts) {
                        accumulate(&mut grads[j], part)?;
                    }
                }
            }
        }
        input_grad.ok_or_else(|| Error::Usage("no gradient reached the input".into()))
    }

    /// Forward pass followed by a row-wise argmax of the logits.
    pub fn predict(&mut self, input: &Tensor<T>) -> Result<Vec<usize>> {
        self.forward(input)?.argmax_rows()
    }

    pub fn sgd_step(&mut self, learning_rate: T) {
        sgd_step(self.states_mut(), learning_rate);
    }

    pub fn zero_gradients(&mut self) {
        self.states_mut().for_each(LayerState::zero_gradients);
    }

    /// All gradients in execution order; within a layer weights then biases,
    /// row-major.
    pub fn gradients_flat(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.parameter_count());
        for s in self.states() {
            out.extend_from_slice(s.weight_gradients.data());
            out.extend_from_slice(s.bias_gradients.data());
        }
        out
    }

    pub fn set_gradients_flat(&mut self, flat: &[T]) -> Result<()> {
        self.check_flat_len(flat.len())?;
        let mut offset = 0;
        for s in self.states_mut() {
            for t in [&mut s.weight_gradients, &mut s.bias_gradients] {
                let len = t.len();
                t.data_mut().copy_from_slice(&flat[offset..offset + len]);
                offset += len;
            }
        }
        Ok(())
    }

    /// All parameters in the same layout as [`Network::gradients_flat`].
    pub fn parameters_flat(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.parameter_count());
        for s in self.states() {
            out.extend_from_slice(s.weights.data());
            out.extend_from_slice(s.biases.data());
        }
        out
    }

    pub fn set_parameters_flat(&mut self, flat: &[T]) -> Result<()> {
        self.check_flat_len(flat.len())?;
        let mut offset = 0;
        for s in self.states_mut() {
            for t in [&mut s.weights, &mut s.biases] {
                let len = t.len();
                t.data_mut().copy_from_slice(&flat[offset..offset + len]);
                offset += len;
            }
        }
        Ok(())
    }

    fn check_flat_len(&self, len: usize) -> Result<()> {
        let expected = self.parameter_count();
        if len != expected {
            return Err(Error::Protocol(format!(
                "flat vector has {len} entries, network has {expected} parameters"
            )));
        }
        Ok(())
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, grad: Tensor<T>) -> Result<()> {
    match slot {
        None => *slot = Some(grad),
        Some(existing) => {
            if existing.shape() != grad.shape() {
                return Err(Error::Shape(format!(
                    "gradient shapes {:?} and {:?} disagree",
                    existing.shape(),
                    grad.shape()
                )));
            }
            for (a, &b) in existing.data_mut().iter_mut().zip(grad.data()) {
                *a += b;
            }
        }
    }
    Ok(())
}
