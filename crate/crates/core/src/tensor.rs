//! Dense row-major tensors over a real scalar.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Debug;
use core::iter::Sum;
use core::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Scalar type of the numerical core.
///
/// Models, checkpoints and experiments use `f32`; gradient verification
/// instantiates the same code with `f64`.
pub trait Real: Float + Default + Debug + Sum + AddAssign + SubAssign + MulAssign + Send + Sync + 'static {
    fn c(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn bits(self) -> u64;
}

impl Real for f32 {
    fn c(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn bits(self) -> u64 {
        self.to_bits() as u64
    }
}

impl Real for f64 {
    fn c(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn bits(self) -> u64 {
        self.to_bits()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Real = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if shape.is_empty() || shape.contains(&0) || numel != data.len() {
            return Err(Error::Shape { shape, len: data.len() });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![value; numel],
            requires_grad: false,
        }
    }

    pub fn scalar(value: T) -> Self {
        Self::full([1], value)
    }

    pub fn from_slice(shape: impl Into<Vec<usize>>, data: &[T]) -> Result<Self> {
        Self::new(shape, data.to_vec())
    }

    /// Samples i.i.d. `N(0, std^2)` entries.
    pub fn randn<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, std: f64, rng: &mut R) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        let data = (0..numel)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::c(z * std)
            })
            .collect();
        Self {
            shape,
            data,
            requires_grad: false,
        }
    }

    /// Converts the scalar type, rounding when narrowing.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::c(v.as_f64())).collect(),
            requires_grad: self.requires_grad,
        }
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn set_requires_grad(&mut self, requires_grad: bool) {
        self.requires_grad = requires_grad;
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Size of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("tensors have rank >= 1")
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() || shape.contains(&0) {
            return Err(Error::Shape {
                shape,
                len: self.data.len(),
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn same_shape(&self, other: &Tensor<T>) -> bool {
        self.shape == other.shape
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn get(&self, index: &[usize]) -> T {
        let mut flat = 0;
        for (&ix, &dim) in index.iter().zip(&self.shape) {
            debug_assert!(ix < dim);
            flat = flat * dim + ix;
        }
        self.data[flat]
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> T {
        assert_eq!(self.shape, other.shape, "max_abs_diff on different shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::c(self.data.len() as f64)
    }

    pub fn l2_norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum::<T>().sqrt()
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: T, other: &Tensor<T>) -> Result<()> {
        self.check_same("axpy", other)?;
        axpy(alpha, &other.data, &mut self.data);
        Ok(())
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_same("sub", other)?;
        Ok(self.zip_map(other, |a, b| a - b))
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_same("add", other)?;
        Ok(self.zip_map(other, |a, b| a + b))
    }

    pub fn scaled(&self, alpha: T) -> Tensor<T> {
        self.map(|v| v * alpha)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            requires_grad: false,
        }
    }

    fn zip_map(&self, other: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
            requires_grad: false,
        }
    }

    fn check_same(&self, op: &'static str, other: &Tensor<T>) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Dimension {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(())
    }

    /// Row-wise softmax over the last axis, outside any tape.
    pub fn softmax_last(&self) -> Tensor<T> {
        let mut out = self.clone();
        out.requires_grad = false;
        let c = self.last_dim();
        for row in out.data.chunks_mut(c) {
            softmax_in_place(row);
        }
        out
    }

    /// Argmax over the last axis; ties resolve to the lowest index.
    pub fn argmax_last(&self) -> Vec<usize> {
        let c = self.last_dim();
        self.data.chunks(c).map(argmax).collect()
    }

    /// Bit-level equality of shape and contents.
    pub fn bit_eq(&self, other: &Tensor<T>) -> bool {
        self.shape == other.shape && self.data.iter().zip(&other.data).all(|(a, b)| a.bits() == b.bits())
    }
}

pub(crate) fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Eight independent partial sums so the loop vectorizes.
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

/// Index of the largest value, lowest index on ties.
pub fn argmax<T: Real>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
