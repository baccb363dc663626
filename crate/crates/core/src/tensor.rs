//! Dense row-major tensors.
//!
//! Values are immutable once a tensor has been handed to the tape; the
//! mutating helpers exist for construction and for optimizer updates on
//! plain parameter storage.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense real-valued tensor, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<R: Scalar> {
    shape: Vec<usize>,
    values: Vec<R>,
}

impl<R: Scalar> Tensor<R> {
    /// Build a tensor, checking that the shape product matches the value count.
    pub fn new(shape: Vec<usize>, values: Vec<R>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::contract(format!(
                "shape {:?} implies {} values, got {}",
                shape,
                numel,
                values.len()
            )));
        }
        Ok(Tensor { shape, values })
    }

    /// Scalar tensor (empty shape, one value).
    pub fn scalar(v: R) -> Self {
        Tensor {
            shape: vec![],
            values: vec![v],
        }
    }

    /// Rank-1 tensor from a vector of values.
    pub fn vector(values: Vec<R>) -> Self {
        Tensor {
            shape: vec![values.len()],
            values,
        }
    }

    /// Rank-2 tensor from row-major values.
    pub fn matrix(rows: usize, cols: usize, values: Vec<R>) -> Result<Self> {
        Tensor::new(vec![rows, cols], values)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            values: vec![R::zero(); numel],
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            values: vec![R::one(); numel],
        }
    }

    pub fn full(shape: &[usize], v: R) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            values: vec![v; numel],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[R] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [R] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<R> {
        self.values
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    /// True for rank-0 tensors and single-element rank-1 tensors.
    pub fn is_scalar(&self) -> bool {
        self.values.len() == 1
    }

    /// The single value of a scalar tensor.
    pub fn item(&self) -> Result<R> {
        if !self.is_scalar() {
            return Err(Error::contract(format!(
                "item() on non-scalar tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.values[0])
    }

    /// Rows of a rank-2 tensor (rank-1 tensors count as a single row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => 1,
        }
    }

    /// Columns of a rank-2 tensor, or the length of a rank-1 tensor.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[1],
            1 => self.shape[0],
            _ => 1,
        }
    }

    /// Row slice of a rank-2 tensor.
    pub fn row(&self, r: usize) -> &[R] {
        let c = self.cols();
        &self.values[r * c..(r + 1) * c]
    }

    /// Elementwise map into a new tensor.
    pub fn map(&self, f: impl Fn(R) -> R) -> Tensor<R> {
        Tensor {
            shape: self.shape.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combination of two same-shape tensors.
    pub fn zip(&self, other: &Tensor<R>, f: impl Fn(R, R) -> R) -> Result<Tensor<R>> {
        if self.shape != other.shape {
            return Err(Error::contract(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// Matrix product of two rank-2 tensors (or vector-as-row conventions).
    pub fn matmul(&self, other: &Tensor<R>) -> Result<Tensor<R>> {
        let (m, k) = (self.rows(), self.cols());
        let (k2, n) = (other.rows(), other.cols());
        if k != k2 || self.shape.len() > 2 || other.shape.len() > 2 {
            return Err(Error::contract(format!(
                "matmul shape mismatch: {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let mut out = vec![R::zero(); m * n];
        matmul_into(&self.values, &other.values, &mut out, m, k, n);
        Tensor::new(vec![m, n], out)
    }

    /// Largest absolute entry, zero for empty tensors.
    pub fn max_abs(&self) -> R {
        self.values
            .iter()
            .fold(R::zero(), |acc, &v| acc.max(v.abs()))
    }

    /// Index of the first non-finite value, if any.
    pub fn first_nonfinite(&self) -> Option<usize> {
        self.values.iter().position(|v| !v.is_finite())
    }

    /// Lower to f64 storage for serialization.
    pub fn to_f64(&self) -> (Vec<usize>, Vec<f64>) {
        (
            self.shape.clone(),
            self.values.iter().map(|v| v.to_f64_lossy()).collect(),
        )
    }

    /// Rebuild from f64 storage.
    pub fn from_f64(shape: Vec<usize>, values: &[f64]) -> Result<Self> {
        Tensor::new(shape, values.iter().map(|&v| R::c(v)).collect())
    }
}

/// `out = a (m x k) * b (k x n)`, row-major, accumulating in place.
pub(crate) fn matmul_into<R: Scalar>(a: &[R], b: &[R], out: &mut [R], m: usize, k: usize, n: usize) {
    for v in out.iter_mut() {
        *v = R::zero();
    }
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == R::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + aip * bv;
            }
        }
    }
}
