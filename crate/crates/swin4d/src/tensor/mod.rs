//! Dense n-dimensional tensors with tape-based reverse-mode autodiff.
//!
//! [`Tensor`] is an immutable row-major buffer plus a shape. Differentiable
//! programs are built by pushing operations onto a [`Tape`]; every op returns
//! a [`Var`] handle that carries the forward value. [`Tape::backward`] replays
//! the recorded ops in reverse and accumulates gradients for every tracked
//! variable, additively across fan-out.
//!
//! Two element types are supported: `f64` for oracle/gradient work and `f32`
//! for training and throughput runs.

mod gradcheck;
pub mod ops;
mod tape;

pub use gradcheck::{grad_check, grad_check_multi};
pub use tape::{Gradients, Tape, Var};

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Storage precision of a tensor element type.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    Single,
    Double,
}

/// Scalar element type a tensor can hold.
pub trait Elem:
    num_traits::Float
    + num_traits::NumAssign
    + fmt::Debug
    + fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    const PRECISION: Precision;

    fn of_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// Additive mask value that saturates softmax without overflowing.
    fn mask_neg_large() -> Self;
}

impl Elem for f32 {
    const PRECISION: Precision = Precision::Single;

    fn of_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn mask_neg_large() -> Self {
        -1e4
    }
}

impl Elem for f64 {
    const PRECISION: Precision = Precision::Double;

    fn of_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn mask_neg_large() -> Self {
        -1e9
    }
}

/// Dense tensor: row-major data plus shape. Cloning is cheap (shared buffer);
/// the buffer is immutable once constructed.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
}

impl<T: Elem> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.len() <= 16 {
            write!(f, " {:?}", &self.data[..])
        } else {
            write!(f, " [{} elements]", self.len())
        }
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides for a shape.
pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

impl<T: Elem> Tensor<T> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected = numel(&shape);
        if expected != data.len() {
            return Err(Error::ElementCount {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self {
            shape,
            data: Arc::new(data),
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: Arc::new(vec![T::zero(); numel(shape)]),
        }
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: Arc::new(vec![v; numel(shape)]),
        }
    }

    /// Rank-0 tensor holding one value.
    pub fn scalar(v: T) -> Self {
        Self {
            shape: vec![],
            data: Arc::new(vec![v]),
        }
    }

    /// Build from a function of the multi-index, iterating row-major.
    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> T) -> Self {
        let n = numel(shape);
        let mut idx = vec![0usize; shape.len()];
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f(&idx));
            for ax in (0..shape.len()).rev() {
                idx[ax] += 1;
                if idx[ax] < shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        Self {
            shape: shape.to_vec(),
            data: Arc::new(data),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }

    pub fn at(&self, idx: &[usize]) -> T {
        debug_assert_eq!(idx.len(), self.shape.len());
        let strides = self.strides();
        let flat: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        self.data[flat]
    }

    /// The single value of a scalar (or one-element) tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Same data, new shape; element count must match.
    pub fn reshaped(&self, new_shape: &[usize]) -> Result<Self> {
        if numel(new_shape) != self.len() {
            return Err(Error::ElementCount {
                shape: new_shape.to_vec(),
                expected: numel(new_shape),
                actual: self.len(),
            });
        }
        Ok(Self {
            shape: new_shape.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&v| f(v)).collect()),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn from_f64_slice(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::from_vec(shape.to_vec(), data.iter().map(|&v| T::of_f64(v)).collect())
    }

    pub fn cast<U: Elem>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|v| U::of_f64(v.as_f64())).collect()),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Self {
            shape,
            data: Arc::new(data),
        }
    }
}
