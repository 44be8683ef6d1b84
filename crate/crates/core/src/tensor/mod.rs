//! Dense row-major tensor with explicit shape metadata.
//!
//! Values are contiguous, copies happen on reshape, and there are no
//! views or strides. Buffers register with the thread-local allocation
//! audit so the benchmark harness can attribute transient memory.

mod io;
mod ops;

use std::ops::{Deref, DerefMut};

use crate::alloc;
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::scalar::Scalar;

pub use io::{read_tensor, write_tensor};
pub(crate) use ops::{
    bilinear_input_grad, depthwise_input_grad, depthwise_kernel_grad, gauss_cdf, gauss_pdf,
    matmul_2d as matmul_into,
};

/// Heap buffer that reports its size to the allocation audit.
#[derive(Debug)]
struct TrackedVec<T> {
    inner: Vec<T>,
}

impl<T> TrackedVec<T> {
    fn new(inner: Vec<T>) -> Self {
        alloc::on_alloc(inner.len() * std::mem::size_of::<T>());
        TrackedVec { inner }
    }
}

impl<T: Clone> Clone for TrackedVec<T> {
    fn clone(&self) -> Self {
        TrackedVec::new(self.inner.clone())
    }
}

impl<T> Drop for TrackedVec<T> {
    fn drop(&mut self) {
        alloc::on_dealloc(self.inner.len() * std::mem::size_of::<T>());
    }
}

impl<T> Deref for TrackedVec<T> {
    type Target = [T];
    fn deref(&self) -> &[T] {
        &self.inner
    }
}

impl<T> DerefMut for TrackedVec<T> {
    fn deref_mut(&mut self) -> &mut [T] {
        &mut self.inner
    }
}

#[derive(Debug, Clone)]
pub struct Tensor<T: Scalar> {
    shape: Vec<usize>,
    data: TrackedVec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected = checked_len(&shape)?;
        if expected != data.len() {
            return Err(Error::dimension(
                "from_vec",
                format!("shape {:?} implies {} values, got {}", shape, expected, data.len()),
            ));
        }
        Ok(Tensor {
            shape,
            data: TrackedVec::new(data),
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = checked_len(shape).expect("shape overflow");
        Tensor {
            shape: shape.to_vec(),
            data: TrackedVec::new(vec![T::zero(); len]),
        }
    }

    /// Fallible zeros for benchmark sweeps that may exceed memory.
    pub fn try_zeros(shape: &[usize]) -> Result<Self> {
        let len = checked_len(shape)?;
        let mut v: Vec<T> = Vec::new();
        v.try_reserve_exact(len).map_err(|_| {
            Error::Contract(format!("allocation of {:?} ({} values) failed", shape, len))
        })?;
        v.resize(len, T::zero());
        Ok(Tensor {
            shape: shape.to_vec(),
            data: TrackedVec::new(v),
        })
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        let len = checked_len(shape).expect("shape overflow");
        Tensor {
            shape: shape.to_vec(),
            data: TrackedVec::new(vec![value; len]),
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: TrackedVec::new(vec![value]),
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let len = checked_len(shape).expect("shape overflow");
        Tensor {
            shape: shape.to_vec(),
            data: TrackedVec::new((0..len).map(&mut f).collect()),
        }
    }

    /// Identity matrix.
    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    /// Uniform samples in [lo, hi) from the deterministic stream.
    pub fn rand_uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut SplitMix64) -> Self {
        Tensor::from_fn(shape, |_| T::from_f64(rng.uniform(lo, hi)))
    }

    /// Truncated-normal samples (two-sigma cut) with the given std.
    pub fn rand_trunc_normal(shape: &[usize], std: f64, rng: &mut SplitMix64) -> Self {
        Tensor::from_fn(shape, |_| T::from_f64(rng.trunc_normal(std)))
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

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// Row-major linear offset of a multi-index.
    pub fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut off = 0;
        for (i, &x) in idx.iter().enumerate() {
            debug_assert!(x < self.shape[i]);
            off = off * self.shape[i] + x;
        }
        off
    }

    pub fn at(&self, idx: &[usize]) -> T {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], value: T) {
        let off = self.offset(idx);
        self.data[off] = value;
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Largest absolute element difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Convert element type, used by the f32-vs-f64 agreement checks.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor::from_fn(&self.shape, |i| U::from_f64(self.data[i].to_f64()))
    }
}

pub(crate) fn checked_len(shape: &[usize]) -> Result<usize> {
    if shape.iter().any(|&e| e == 0) {
        return Err(Error::dimension(
            "shape",
            format!("all extents must be >= 1, got {:?}", shape),
        ));
    }
    shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| Error::dimension("shape", format!("extent product overflow: {:?}", shape)))
}

/// Debug-mode guard: ops that promise finite outputs for finite inputs
/// call this on their result.
#[inline]
pub(crate) fn debug_check_finite<T: Scalar>(t: &Tensor<T>, op: &'static str) {
    if cfg!(debug_assertions) {
        debug_assert!(t.all_finite(), "non-finite value produced by {op}");
    }
}
