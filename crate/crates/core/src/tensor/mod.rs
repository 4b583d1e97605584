//! Dense row-major tensors and the fixed layer vocabulary used by searched
//! networks.

mod conv;
mod gemm;
mod layers;

pub use conv::{conv2d_backward, conv2d_forward, same_padding};
pub use layers::{
    dense_backward, dense_forward, flatten_backward, flatten_forward, relu_backward, relu_forward,
    sgd_step, softmax_cross_entropy, LayerKind, LayerState,
};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense n-dimensional array, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        check_shape(&shape)?;
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        check_shape(shape)?;
        let len = shape.iter().product();
        Ok(Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); len],
        })
    }

    pub fn filled(shape: &[usize], value: T) -> Result<Self> {
        let mut t = Self::zeros(shape)?;
        t.data.fill(value);
        Ok(t)
    }

    /// Builds a tensor from a function of the flat index.
    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> T) -> Result<Self> {
        check_shape(shape)?;
        let len = shape.iter().product();
        Ok(Self {
            shape: shape.to_vec(),
            data: (0..len).map(f).collect(),
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Same data under a new shape with the same element count.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        check_shape(shape)?;
        let len: usize = shape.iter().product();
        if len != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn fill(&mut self, value: T) {
        self.data.fill(value);
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Copies the rows `indices` of the leading axis into a new tensor.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Shape("cannot select zero rows".into()));
        }
        let lead = self.shape[0];
        let row: usize = self.shape[1..].iter().product();
        let mut data = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            if i >= lead {
                return Err(Error::Shape(format!("row {i} out of range 0..{lead}")));
            }
            data.extend_from_slice(&self.data[i * row..(i + 1) * row]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Ok(Self { shape, data })
    }

    /// Concatenates tensors along axis 1, the channel (or feature) axis.
    /// All other dimensions must agree.
    pub fn concat_channels(parts: &[&Tensor<T>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("nothing to concatenate".into()))?;
        if first.ndim() < 2 {
            return Err(Error::Shape("channel concatenation needs rank >= 2".into()));
        }
        for p in parts {
            if p.ndim() != first.ndim()
                || p.shape[0] != first.shape[0]
                || p.shape[2..] != first.shape[2..]
            {
                return Err(Error::Shape(format!(
                    "cannot concatenate {:?} with {:?} along channels",
                    first.shape, p.shape
                )));
            }
        }
        let batch = first.shape[0];
        let inner: usize = first.shape[2..].iter().product();
        let channels: usize = parts.iter().map(|p| p.shape[1]).sum();
        let mut data = Vec::with_capacity(batch * channels * inner);
        for n in 0..batch {
            for p in parts {
                let block = p.shape[1] * inner;
                data.extend_from_slice(&p.data[n * block..(n + 1) * block]);
            }
        }
        let mut shape = first.shape.clone();
        shape[1] = channels;
        Ok(Self { shape, data })
    }

    /// Inverse of [`Tensor::concat_channels`]: splits axis 1 into blocks of
    /// the given widths.
    pub fn split_channels(&self, widths: &[usize]) -> Result<Vec<Self>> {
        if self.ndim() < 2 || widths.iter().sum::<usize>() != self.shape[1] {
            return Err(Error::Shape(format!(
                "cannot split {:?} into channel blocks {widths:?}",
                self.shape
            )));
        }
        let batch = self.shape[0];
        let inner: usize = self.shape[2..].iter().product();
        let mut out: Vec<Vec<T>> = widths
            .iter()
            .map(|w| Vec::with_capacity(batch * w * inner))
            .collect();
        for n in 0..batch {
            let mut offset = n * self.shape[1] * inner;
            for (w, buf) in widths.iter().zip(out.iter_mut()) {
                buf.extend_from_slice(&self.data[offset..offset + w * inner]);
                offset += w * inner;
            }
        }
        widths
            .iter()
            .zip(out)
            .map(|(&w, data)| {
                let mut shape = self.shape.clone();
                shape[1] = w;
                Tensor::new(shape, data)
            })
            .collect()
    }

    /// Index of the largest entry in each row of a `[N, C]` tensor. Ties go
    /// to the lowest index.
    pub fn argmax_rows(&self) -> Result<Vec<usize>> {
        if self.ndim() != 2 {
            return Err(Error::Shape(format!(
                "argmax_rows needs [N, C], got {:?}",
                self.shape
            )));
        }
        let cols = self.shape[1];
        Ok(self
            .data
            .chunks(cols)
            .map(|row| {
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect())
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::Shape(format!(
            "dimensions must be non-empty and positive, got {shape:?}"
        )));
    }
    Ok(())
}
