//! Dense row-major tensor.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense tensor with a contiguous row-major buffer.
///
/// The last axis is fastest-varying. Kernels index the buffer directly with
/// precomputed strides; this type only guards the shape/buffer contract.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S: Scalar> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    /// Wraps an existing buffer. The buffer length must equal the product of
    /// the extents.
    pub fn new(shape: &[usize], data: Vec<S>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::shape(format!(
                "buffer length {} does not match shape {:?} ({} elements)",
                data.len(),
                shape,
                numel
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![S::zero(); numel],
        }
    }

    pub fn filled(shape: &[usize], value: S) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> S) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..numel).map(|i| f(i)).collect(),
        }
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    #[inline]
    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn data(&self) -> &[S] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// Row-major strides (in elements) for the current shape.
    pub fn strides(&self) -> Vec<usize> {
        let mut s = vec![1usize; self.shape.len()];
        for i in (0..self.shape.len().saturating_sub(1)).rev() {
            s[i] = s[i + 1] * self.shape[i + 1];
        }
        s
    }

    /// Flat offset of a multi-index. Intended for tests and cold paths.
    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        let strides = self.strides();
        index
            .iter()
            .zip(strides.iter())
            .map(|(i, s)| i * s)
            .sum()
    }

    pub fn at(&self, index: &[usize]) -> S {
        self.data[self.offset(index)]
    }

    pub fn at_mut(&mut self, index: &[usize]) -> &mut S {
        let o = self.offset(index);
        &mut self.data[o]
    }

    /// Reinterprets the buffer under a new shape with the same element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} ({} elements) to {:?} ({} elements)",
                self.shape,
                self.data.len(),
                shape,
                numel
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Converts elements to another scalar type through f64.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| T::from_acc(x.to_acc())).collect(),
        }
    }

    /// Errors unless the tensor has exactly the given shape.
    pub fn expect_shape(&self, shape: &[usize], what: &str) -> Result<()> {
        if self.shape != shape {
            return Err(Error::shape(format!(
                "{what}: expected shape {:?}, got {:?}",
                shape, self.shape
            )));
        }
        Ok(())
    }

    /// Errors unless the tensor has the given rank.
    pub fn expect_rank(&self, rank: usize, what: &str) -> Result<()> {
        if self.shape.len() != rank {
            return Err(Error::shape(format!(
                "{what}: expected rank {rank}, got shape {:?}",
                self.shape
            )));
        }
        Ok(())
    }
}
