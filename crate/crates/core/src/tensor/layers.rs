use std::fmt;

use super::gemm::{gemm, Op};
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// The layer vocabulary a descriptor can declare.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    /// Stride-1 convolution with "same" zero padding and a square kernel.
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
    },
    Dense {
        in_features: usize,
        out_features: usize,
    },
    ReLU,
    Flatten,
    /// Marks the loss head. Passes logits through unchanged; the trainer
    /// applies softmax cross-entropy to the network output.
    SoftmaxCrossEntropy,
}

impl LayerKind {
    /// Lower-case tag used in serialized descriptors and auto-generated names.
    pub fn tag(&self) -> &'static str {
        match self {
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::Dense { .. } => "dense",
            LayerKind::ReLU => "relu",
            LayerKind::Flatten => "flatten",
            LayerKind::SoftmaxCrossEntropy => "softmax_cross_entropy",
        }
    }

    /// Kind-specific integer parameters, in a fixed order.
    pub fn params(&self) -> Vec<(&'static str, usize)> {
        match *self {
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
            } => vec![
                ("in_channels", in_channels),
                ("out_channels", out_channels),
                ("kernel", kernel),
            ],
            LayerKind::Dense {
                in_features,
                out_features,
            } => vec![("in_features", in_features), ("out_features", out_features)],
            _ => Vec::new(),
        }
    }

    /// Rebuilds a kind from its tag and parameters.
    pub fn from_parts(tag: &str, param: impl Fn(&str) -> Option<usize>) -> Result<Self> {
        let need = |key: &str| {
            param(key).ok_or_else(|| Error::Declaration(format!("{tag} is missing `{key}`")))
        };
        let kind = match tag {
            "conv2d" => LayerKind::Conv2d {
                in_channels: need("in_channels")?,
                out_channels: need("out_channels")?,
                kernel: need("kernel")?,
            },
            "dense" => LayerKind::Dense {
                in_features: need("in_features")?,
                out_features: need("out_features")?,
            },
            "relu" => LayerKind::ReLU,
            "flatten" => LayerKind::Flatten,
            "softmax_cross_entropy" => LayerKind::SoftmaxCrossEntropy,
            other => return Err(Error::Declaration(format!("unknown layer kind `{other}`"))),
        };
        kind.check()?;
        Ok(kind)
    }

    pub fn check(&self) -> Result<()> {
        if self.params().iter().any(|&(_, v)| v == 0) {
            return Err(Error::Declaration(format!(
                "{} parameters must all be >= 1, got {:?}",
                self.tag(),
                self.params()
            )));
        }
        Ok(())
    }

    /// Trainable scalars: weights plus biases.
    pub fn parameter_count(&self) -> usize {
        match *self {
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
            } => out_channels * (in_channels * kernel * kernel + 1),
            LayerKind::Dense {
                in_features,
                out_features,
            } => out_features * (in_features + 1),
            _ => 0,
        }
    }

    pub fn is_trainable(&self) -> bool {
        matches!(self, LayerKind::Conv2d { .. } | LayerKind::Dense { .. })
    }

    /// Weight and bias shapes for trainable kinds.
    pub fn parameter_shapes(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        match *self {
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
            } => Some((
                vec![out_channels, in_channels, kernel, kernel],
                vec![out_channels],
            )),
            LayerKind::Dense {
                in_features,
                out_features,
            } => Some((vec![out_features, in_features], vec![out_features])),
            _ => None,
        }
    }

    /// Inputs feeding one output unit, used for weight initialization.
    pub fn fan_in(&self) -> usize {
        match *self {
            LayerKind::Conv2d {
                in_channels,
                kernel,
                ..
            } => in_channels * kernel * kernel,
            LayerKind::Dense { in_features, .. } => in_features,
            _ => 0,
        }
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.tag())?;
        let params = self.params();
        if !params.is_empty() {
            let inner: Vec<String> = params.iter().map(|(k, v)| format!("{k}={v}")).collect();
            write!(f, "({})", inner.join(", "))?;
        }
        Ok(())
    }
}

/// Parameters of one trainable layer and the gradients of the last backward
/// pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerState<T> {
    pub weights: Tensor<T>,
    pub biases: Tensor<T>,
    pub weight_gradients: Tensor<T>,
    pub bias_gradients: Tensor<T>,
}

impl<T: Scalar> LayerState<T> {
    pub fn new(weights: Tensor<T>, biases: Tensor<T>) -> Result<Self> {
        if biases.ndim() != 1 || biases.shape()[0] != weights.shape()[0] {
            return Err(Error::Shape(format!(
                "bias shape {:?} does not match weights {:?}",
                biases.shape(),
                weights.shape()
            )));
        }
        Ok(Self {
            weight_gradients: Tensor::zeros(weights.shape())?,
            bias_gradients: Tensor::zeros(biases.shape())?,
            weights,
            biases,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.len() + self.biases.len()
    }

    pub fn zero_gradients(&mut self) {
        self.weight_gradients.fill(T::zero());
        self.bias_gradients.fill(T::zero());
    }
}

fn dense_geometry<T: Scalar>(
    input: &Tensor<T>,
    state: &LayerState<T>,
) -> Result<(usize, usize, usize)> {
    let w = state.weights.shape();
    if w.len() != 2 {
        return Err(Error::Shape(format!(
            "dense weights must be [out, in], got {w:?}"
        )));
    }
    let s = input.shape();
    if s.len() != 2 {
        return Err(Error::Shape(format!(
            "dense input must be [N, F], got {s:?}"
        )));
    }
    if s[1] != w[1] {
        return Err(Error::Shape(format!(
            "dense expects {} input features, got {}",
            w[1], s[1]
        )));
    }
    Ok((s[0], w[1], w[0]))
}

/// `output = input * weights^T + biases`.
pub fn dense_forward<T: Scalar>(input: &Tensor<T>, state: &LayerState<T>) -> Result<Tensor<T>> {
    let (batch, fin, fout) = dense_geometry(input, state)?;
    let mut out = vec![T::zero(); batch * fout];
    gemm(
        batch,
        fin,
        fout,
        input.data(),
        Op::N,
        state.weights.data(),
        Op::T,
        &mut out,
        false,
    );
    for row in out.chunks_mut(fout) {
        for (v, &b) in row.iter_mut().zip(state.biases.data()) {
            *v += b;
        }
    }
    Tensor::new(vec![batch, fout], out)
}

pub fn dense_backward<T: Scalar>(
    upstream: &Tensor<T>,
    cached_input: Option<&Tensor<T>>,
    state: &mut LayerState<T>,
) -> Result<Tensor<T>> {
    let input = cached_input
        .ok_or_else(|| Error::Usage("dense backward called without a cached input".into()))?;
    let (batch, fin, fout) = dense_geometry(input, state)?;
    if upstream.shape() != [batch, fout] {
        return Err(Error::Shape(format!(
            "dense upstream gradient {:?} does not match output [{batch}, {fout}]",
            upstream.shape()
        )));
    }
    let up = upstream.data();
    let mut grad_w = vec![T::zero(); fout * fin];
    gemm(
        fout,
        batch,
        fin,
        up,
        Op::T,
        input.data(),
        Op::N,
        &mut grad_w,
        false,
    );
    let mut grad_b = vec![T::zero(); fout];
    for row in up.chunks(fout) {
        for (g, &u) in grad_b.iter_mut().zip(row) {
            *g += u;
        }
    }
    let mut grad_in = vec![T::zero(); batch * fin];
    gemm(
        batch,
        fout,
        fin,
        up,
        Op::N,
        state.weights.data(),
        Op::N,
        &mut grad_in,
        false,
    );
    state.weight_gradients = Tensor::new(vec![fout, fin], grad_w)?;
    state.bias_gradients = Tensor::new(vec![fout], grad_b)?;
    Tensor::new(vec![batch, fin], grad_in)
}

pub fn relu_forward<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Passes the upstream gradient where the forward input was positive.
pub fn relu_backward<T: Scalar>(
    upstream: &Tensor<T>,
    cached_input: &Tensor<T>,
) -> Result<Tensor<T>> {
    if upstream.shape() != cached_input.shape() {
        return Err(Error::Shape(format!(
            "relu upstream gradient {:?} does not match input {:?}",
            upstream.shape(),
            cached_input.shape()
        )));
    }
    let data = upstream
        .data()
        .iter()
        .zip(cached_input.data())
        .map(|(&u, &x)| if x > T::zero() { u } else { T::zero() })
        .collect();
    Tensor::new(upstream.shape().to_vec(), data)
}

/// `[N, ...] -> [N, prod(...)]`.
pub fn flatten_forward<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let batch = input.shape()[0];
    let rest = input.len() / batch;
    input.clone().reshape(&[batch, rest])
}

pub fn flatten_backward<T: Scalar>(
    upstream: &Tensor<T>,
    input_shape: &[usize],
) -> Result<Tensor<T>> {
    upstream.clone().reshape(input_shape)
}

/// Mean softmax cross-entropy over the batch and its gradient with respect
/// to the logits, `(softmax - onehot) / N`.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(T, Tensor<T>)> {
    let s = logits.shape();
    if s.len() != 2 {
        return Err(Error::Shape(format!("logits must be [N, C], got {s:?}")));
    }
    let (batch, classes) = (s[0], s[1]);
    if labels.len() != batch {
        return Err(Error::Input(format!(
            "{} labels for a batch of {batch}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Input(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let inv_n = T::one() / T::of_usize(batch);
    let mut loss = T::zero();
    let mut grad = Vec::with_capacity(batch * classes);
    for (row, &label) in logits.data().chunks(classes).zip(labels) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
        let total: T = exps.iter().copied().sum();
        loss += total.ln() - (row[label] - max);
        for (j, &e) in exps.iter().enumerate() {
            let p = e / total;
            let target = if j == label { T::one() } else { T::zero() };
            grad.push((p - target) * inv_n);
        }
    }
    Ok((loss * inv_n, Tensor::new(vec![batch, classes], grad)?))
}

/// Plain SGD: `p -= learning_rate * grad(p)`, then zeroes the gradients.
pub fn sgd_step<'a, T: Scalar>(
    states: impl IntoIterator<Item = &'a mut LayerState<T>>,
    learning_rate: T,
) {
    for state in states {
        let LayerState {
            weights,
            biases,
            weight_gradients,
            bias_gradients,
        } = state;
        for (p, &g) in weights.data_mut().iter_mut().zip(weight_gradients.data()) {
            *p -= learning_rate * g;
        }
        for (p, &g) in biases.data_mut().iter_mut().zip(bias_gradients.data()) {
            *p -= learning_rate * g;
        }
        state.zero_gradients();
    }
}
