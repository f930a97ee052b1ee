use serde::{Deserialize, Serialize};

use super::Scalar;
use crate::error::{Error, Result};

/// Dense row-major tensor over a flat buffer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor<T = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape("Tensor::new", &[expected], &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// One-dimensional tensor.
    pub fn vector(data: Vec<T>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut out = Self::zeros(&[n, n]);
        for i in 0..n {
            out.data[i * n + i] = T::one();
        }
        out
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Number of columns of a 2-D tensor (1 for vectors).
    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1..].iter().product()
        } else {
            1
        }
    }

    pub fn row(&self, r: usize) -> &[T] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape("Tensor::reshape", &[n], &[self.data.len()]));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn ensure_shape(&self, expected: &[usize], context: &str) -> Result<()> {
        if self.shape != expected {
            return Err(Error::shape(context, expected, &self.shape));
        }
        Ok(())
    }

    pub fn ensure_same_shape(&self, other: &Self, context: &str) -> Result<()> {
        self.ensure_shape(&other.shape, context)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, context: &str, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.ensure_same_shape(other, context)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|x| x * s)
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: T, other: &Self) -> Result<()> {
        self.ensure_same_shape(other, "axpy")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + alpha * b;
        }
        Ok(())
    }

    pub fn dot(&self, other: &Self) -> Result<T> {
        self.ensure_same_shape(other, "dot")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |acc, (&a, &b)| acc + a * b))
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn norm_sq(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &x| acc + x * x)
    }

    pub fn norm(&self) -> T {
        self.norm_sq().sqrt()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &x| acc.max(x.abs()))
    }

    /// Matrix-vector product for a 2-D `self` of shape `[rows, cols]`.
    pub fn matvec(&self, v: &[T]) -> Result<Vec<T>> {
        if self.shape.len() != 2 || self.shape[1] != v.len() {
            return Err(Error::shape("matvec", &[self.cols()], &[v.len()]));
        }
        Ok((0..self.shape[0])
            .map(|r| {
                self.row(r)
                    .iter()
                    .zip(v)
                    .fold(T::zero(), |acc, (&a, &b)| acc + a * b)
            })
            .collect())
    }

    /// Transposed matrix-vector product `selfᵀ v`.
    pub fn matvec_t(&self, v: &[T]) -> Result<Vec<T>> {
        if self.shape.len() != 2 || self.shape[0] != v.len() {
            return Err(Error::shape("matvec_t", &[self.rows()], &[v.len()]));
        }
        let cols = self.shape[1];
        let mut out = vec![T::zero(); cols];
        for (r, &vr) in v.iter().enumerate() {
            for (o, &a) in out.iter_mut().zip(self.row(r)) {
                *o = *o + a * vr;
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Result<Self> {
        if self.shape.len() != 2 {
            return Err(Error::InvalidArgument("transpose needs a matrix".into()));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = Self::zeros(&[c, r]);
        for i in 0..r {
            for j in 0..c {
                out.data[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(out)
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.shape.len() != 2 || other.shape.len() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::shape("matmul", &self.shape, &other.shape));
        }
        let (n, k, m) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = Self::zeros(&[n, m]);
        for i in 0..n {
            for p in 0..k {
                let a = self.data[i * k + p];
                for j in 0..m {
                    out.data[i * m + j] = out.data[i * m + j] + a * other.data[p * m + j];
                }
            }
        }
        Ok(out)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&x| U::lit(x.to_f64_lossy()))
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_length() {
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn matvec_and_transpose_agree() {
        let m = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let v = [1.0, -1.0];
        let a = m.matvec_t(&v).unwrap();
        let b = m.transpose().unwrap().matvec(&v).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, vec![-3.0, -3.0, -3.0]);
    }

    #[test]
    fn matmul_identity() {
        let m = Tensor::matrix(2, 2, vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(m.matmul(&Tensor::identity(2)).unwrap(), m);
    }
}
