//! Dense row-major tensors and a reverse-mode autodiff tape.
//!
//! `Tensor` is a plain value type. Differentiable computation happens on a
//! [`Graph`], whose [`Var`] handles record every op so that
//! [`Graph::backward`] can replay them in reverse.

pub mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod params;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, NumCast};
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

pub use graph::{Graph, NodeId, Var};
pub use params::{Bindings, Init, ParamId, ParamStore};

/// Floating point storage type. `f64` is used by gradient checks and
/// oracles, `f32` by training runs and checkpoints.
pub trait Element:
    Float + Default + Debug + Display + Send + Sync + AddAssign + SubAssign + MulAssign + Sum + 'static
{
    const NAME: &'static str;

    #[inline]
    fn lit(v: f64) -> Self {
        <Self as NumCast>::from(v).expect("finite literal")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        <f64 as NumCast>::from(self).unwrap_or(f64::NAN)
    }
}

impl Element for f32 {
    const NAME: &'static str = "f32";
}

impl Element for f64 {
    const NAME: &'static str = "f64";
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} needs {} values, got {len}", .shape.iter().product::<usize>())]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward already ran on this tape; call zero_grad first")]
    BackwardTwice,
    #[error("tape is broken: node {node} depends on later node {input}")]
    BrokenTape { node: usize, input: usize },
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

/// Row-major dense tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<E> {
    shape: Vec<usize>,
    data: Vec<E>,
}

impl<E: Element> Tensor<E> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<E>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::DataLength { shape, len: data.len() });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, E::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: E) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self { shape, data: vec![value; n] }
    }

    pub fn scalar(value: E) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> E) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Self { data: (0..n).map(&mut f).collect(), shape }
    }

    pub fn from_f64(shape: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| E::lit(v)).collect())
    }

    /// Standard normal entries.
    pub fn randn<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| E::lit(rng.sample::<f64, _>(StandardNormal)))
    }

    /// Uniform entries in `[-bound, bound)`.
    pub fn uniform<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, bound: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| E::lit(rng.random_range(-bound..bound)))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Size of the last axis (1 for a scalar).
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Product of every axis but the last.
    pub fn rows(&self) -> usize {
        if self.shape.is_empty() {
            1
        } else {
            self.numel() / self.cols().max(1)
        }
    }

    pub fn item(&self) -> E {
        self.data[0]
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.numel() {
            return Err(TensorError::Shape { op: "reshape", lhs: self.shape, rhs: shape });
        }
        self.shape = shape;
        Ok(self)
    }

    /// Element at `(row, col)` of a tensor viewed as `rows × cols`.
    pub fn at(&self, row: usize, col: usize) -> E {
        self.data[row * self.cols() + col]
    }

    pub fn row(&self, row: usize) -> &[E] {
        let c = self.cols();
        &self.data[row * c..(row + 1) * c]
    }

    pub fn transpose2(&self) -> Self {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![E::zero(); r * c];
        kernels::transpose(&self.data, r, c, &mut out);
        Self { shape: vec![c, r], data: out }
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(E, E) -> E) -> Result<Self> {
        if self.shape != other.shape {
            return Err(TensorError::Shape {
                op: "zip_map",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn cast<F: Element>(&self) -> Tensor<F> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| F::lit(v.as_f64())).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> E {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> E {
        self.sum() / E::lit(self.numel() as f64)
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k, n) = matmul_dims(self.shape(), other.shape())?;
        let mut out = vec![E::zero(); m * n];
        kernels::matmul(&self.data, &other.data, m, k, n, &mut out);
        Ok(Self { shape: vec![m, n], data: out })
    }

    /// Rows `start..start + len` of a tensor viewed as `rows × cols`.
    pub fn slice_rows(&self, start: usize, len: usize) -> Self {
        let c = self.cols();
        let mut shape = vec![len];
        if self.shape.len() > 1 {
            shape.extend_from_slice(&self.shape[self.shape.len() - 1..]);
        }
        Self { shape, data: self.data[start * c..(start + len) * c].to_vec() }
    }
}

pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize)> {
    if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
        return Err(TensorError::Shape { op: "matmul", lhs: a.to_vec(), rhs: b.to_vec() });
    }
    Ok((a[0], a[1], b[1]))
}
