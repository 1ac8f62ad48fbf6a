//! A small dense-tensor engine with tape-based reverse-mode differentiation.
//!
//! The operator set is closed: whatever the codec, its entropy models and the
//! calibration losses need. Modules that need a fused operator with a
//! hand-written gradient register it through [`Graph::custom`].

mod adam;
mod conv;
mod graph;
mod ops;

pub use adam::{adam_step, adam_step_per_tensor, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use conv::{conv_forward, gemm};
pub use graph::{BackwardOp, Gradients, Graph, Var};
pub(crate) use ops::{sigmoid as sigmoid_scalar, softplus as softplus_scalar};

use crate::error::{Error, Result};

/// Dense row-major array of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} holds {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        match self.data.as_slice() {
            [v] => Ok(*v),
            _ => Err(Error::shape(format!(
                "item() on tensor of shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} to {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Slice `[start, end)` along the leading axis.
    pub fn slice_outer(&self, start: usize, end: usize) -> Result<Self> {
        let outer = *self
            .shape
            .first()
            .ok_or_else(|| Error::shape("slice of a 0-d tensor"))?;
        if start > end || end > outer {
            return Err(Error::shape(format!(
                "slice {start}..{end} of leading axis {outer}"
            )));
        }
        let inner: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Ok(Self {
            shape,
            data: self.data[start * inner..end * inner].to_vec(),
        })
    }

    /// Concatenates along the leading axis; all trailing dims must agree.
    pub fn stack_outer(parts: &[Tensor]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("stack of zero tensors"))?;
        let mut shape = first.shape.clone();
        let mut data = Vec::new();
        let mut outer = 0;
        for p in parts {
            if p.shape[1..] != first.shape[1..] {
                return Err(Error::shape("stack with mismatched trailing dims"));
            }
            outer += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        shape[0] = outer;
        Ok(Self { shape, data })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Rounds every element to single precision, so the tensor survives an
    /// `f32` serialization round trip unchanged.
    pub fn snap_to_f32(&mut self) {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
    }
}
