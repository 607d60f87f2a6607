//! Dense tensors and the reverse-mode computation tape.
//!
//! [`Tensor`] is a plain owned value: a shape plus a row-major `f64`
//! buffer, optionally carrying a gradient of the same shape. All graph
//! computation happens on a [`Tape`]: leaves are copied in, operations
//! record enough to replay backward, and [`Tape::backward`] populates
//! gradients for every leaf that requires them.

mod ops;
mod tape;

pub use tape::{Tape, TensorId};

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Dense n-dimensional array of 64-bit floats.
///
/// Invariants: `product(shape) == values.len()`, all values finite, and
/// `grad` (when present) has the same length as `values`. An empty shape
/// denotes a scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Build a tensor, validating the shape/value-count invariant and
    /// rejecting non-finite entries.
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(String::from(
                "tensor dimensions must be positive",
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::ShapeMismatch(alloc::format!(
                "shape {:?} implies {} values, got {}",
                shape,
                numel,
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(alloc::format!(
                "tensor constructed with non-finite value {v}"
            )));
        }
        Ok(Self {
            shape,
            values,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape,
            values: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape,
            values: vec![value; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            values: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// Mark this tensor as a differentiable leaf.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Mutable access to the raw buffer. The caller keeps values finite;
    /// the length is fixed by the shape.
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Clear any accumulated gradient.
    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}
