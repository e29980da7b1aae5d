//! Minimal dense-tensor and reverse-mode autodiff engine.
//!
//! The engine is deliberately small: dense row-major tensors, a Wengert-list
//! gradient [`tape`](crate::tensor::tape), an [`Adam`](param::ParamSet::adam_step)
//! optimizer, and the handful of neural building blocks the encoder zoo needs
//! (additive attention, multi-head self-attention, a GRU, 1-D convolution).
//!
//! Everything is generic over [`Real`] so the same code path runs in `f32`
//! (the training/storage precision) and `f64` (used by the finite-difference
//! gradient checker and the metric oracles). Reductions accumulate in `f64`
//! regardless of the storage type to keep long sums well conditioned.

pub mod gradcheck;
pub mod nn;
pub mod param;
pub mod tape;

use crate::{Error, Result};

/// Scalar types the engine can compute with.
///
/// Implemented for `f32` and `f64`. The conversion helpers are total (plain
/// `as` casts) so generic code can round-trip through `f64` accumulators.
pub trait Real:
    num_traits::Float
    + num_traits::NumAssign
    + Default
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    /// Convert from `f64`, rounding as needed.
    fn of(x: f64) -> Self;
    /// Widen to `f64` (named to avoid colliding with `ToPrimitive::to_f64`).
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Dense row-major tensor.
///
/// Rank is the length of `shape`; most of the engine works with rank-2
/// matrices (and treats a `[1 × n]` matrix as a row vector). Elements of a
/// rank-2 tensor with shape `[r × c]` are stored as `data[i * c + j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<R: Real> {
    shape: Vec<usize>,
    data: Vec<R>,
}

impl<R: Real> Tensor<R> {
    /// Create a tensor from a shape and matching flat data.
    pub fn new(shape: Vec<usize>, data: Vec<R>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Usage(format!(
                "tensor shape {:?} implies {} elements but {} were provided",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// All-zero tensor of the given shape.
    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![R::zero(); numel] }
    }

    /// Rank-0-like scalar stored as a `[1 × 1]` matrix.
    pub fn scalar(x: R) -> Self {
        Tensor { shape: vec![1, 1], data: vec![x] }
    }

    /// Rank-2 matrix from a closure over `(row, col)`.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> R) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Tensor { shape: vec![rows, cols], data }
    }

    /// Row vector `[1 × n]`.
    pub fn row(data: Vec<R>) -> Self {
        let n = data.len();
        Tensor { shape: vec![1, n], data }
    }

    /// Shape slice.
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    /// Total number of elements.
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Flat data slice.
    pub fn data(&self) -> &[R] {
        &self.data
    }

    /// Mutable flat data slice.
    pub fn data_mut(&mut self) -> &mut [R] {
        &mut self.data
    }

    /// Consume into the flat data vector.
    pub fn into_data(self) -> Vec<R> {
        self.data
    }

    /// Number of rows of a rank-2 tensor (or 1 for rank-1).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            1 => 1,
            _ => self.shape.first().copied().unwrap_or(1),
        }
    }

    /// Number of columns of a rank-2 tensor (or its length for rank-1).
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[1],
            1 => self.shape[0],
            _ => self.shape.last().copied().unwrap_or(1),
        }
    }

    /// Element of a rank-2 tensor.
    #[inline]
    pub fn at(&self, i: usize, j: usize) -> R {
        self.data[i * self.cols() + j]
    }

    /// Mutable element of a rank-2 tensor.
    #[inline]
    pub fn at_mut(&mut self, i: usize, j: usize) -> &mut R {
        let c = self.cols();
        &mut self.data[i * c + j]
    }

    /// One row of a rank-2 tensor as a slice.
    pub fn row_slice(&self, i: usize) -> &[R] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    /// True if every element is finite.
    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Accumulate `alpha * other` into `self` (same shape).
    pub fn axpy(&mut self, alpha: R, other: &Tensor<R>) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch { op: "axpy", lhs: self.shape.clone(), rhs: other.shape.clone() });
        }
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += alpha * *b;
        }
        Ok(())
    }

    /// Plain (non-recorded) matrix product `self · other`.
    ///
    /// `[m × k] · [k × n] -> [m × n]`, accumulating each dot product in `f64`.
    pub fn matmul(&self, other: &Tensor<R>) -> Result<Tensor<R>> {
        if self.shape.len() != 2 || other.shape.len() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = Tensor::zeros(vec![m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0f64;
                for p in 0..k {
                    acc += self.data[i * k + p].as_f64() * other.data[p * n + j].as_f64();
                }
                out.data[i * n + j] = R::of(acc);
            }
        }
        Ok(out)
    }

    /// Plain transpose of a rank-2 tensor.
    pub fn transpose(&self) -> Result<Tensor<R>> {
        if self.shape.len() != 2 {
            return Err(Error::Usage(format!("transpose expects a rank-2 tensor, got shape {:?}", self.shape)));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        Ok(Tensor::from_fn(c, r, |i, j| self.data[j * c + i]))
    }

    /// Convert element type (used to lift `f32` artifacts into `f64` math).
    pub fn cast<S: Real>(&self) -> Tensor<S> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|x| S::of(x.as_f64())).collect() }
    }
}

/// Dot product of two equal-length slices, accumulated in `f64`.
pub fn dot<R: Real>(a: &[R], b: &[R]) -> Result<R> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch { op: "dot", lhs: vec![a.len()], rhs: vec![b.len()] });
    }
    let mut acc = 0.0f64;
    for (x, y) in a.iter().zip(b.iter()) {
        acc += x.as_f64() * y.as_f64();
    }
    Ok(R::of(acc))
}
