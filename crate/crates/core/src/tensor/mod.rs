//! Dense tensors and reverse-mode automatic differentiation.
//!
//! [`Tensor`] is a plain value: a shape plus a flat row-major `f32` buffer.
//! Differentiable computation happens on a [`Graph`] (a Wengert tape): ops
//! append nodes in creation order and [`Graph::backward`] walks them in
//! strict reverse, accumulating gradients additively. A tensor that never
//! enters a graph is just data and never accumulates gradient.
//!
//! Numeric policy: values are stored in 32-bit, reductions (matmul, conv,
//! layer statistics, losses) run in 64-bit accumulators. For verification
//! the recorded tape can be re-evaluated entirely in 64-bit via
//! [`Graph::eval_f64`], which is what the finite-difference checker uses.

mod gradcheck;
mod graph;
mod kernels;

pub use gradcheck::{grad_check, grad_check_sampled, sample_coords};
pub use graph::{Graph, Var};

use crate::error::{Error, Result};

/// Dense n-dimensional array of 32-bit reals, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Build a tensor from a shape and flat data; `product(shape)` must equal
    /// `data.len()` and every extent must be positive.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Dim {
                context: "tensor extents must be positive",
                lhs: shape,
                rhs: vec![],
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dim {
                context: "shape does not match data length",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Tensor::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    /// Scalar (rank-0) tensor.
    pub fn scalar(value: f32) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.is_empty()
    }

    /// Value of a rank-0 or single-element tensor.
    pub fn item(&self) -> f32 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }
}

/// Row-major index of `idx` under `shape`.
pub fn flat_index(shape: &[usize], idx: &[usize]) -> usize {
    debug_assert_eq!(shape.len(), idx.len());
    let mut flat = 0;
    for (d, i) in shape.iter().zip(idx) {
        debug_assert!(i < d);
        flat = flat * d + i;
    }
    flat
}
