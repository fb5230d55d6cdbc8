//! Dense row-major tensors.
//!
//! Storage is generic over [`Real`] so the same kernels run in `f32` for
//! training and in `f64` for gradient checking. Products always accumulate
//! in `f64`.

use std::fmt::{Debug, Display};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Scalar element type of a [`Tensor`].
pub trait Real:
    num_traits::Float + std::iter::Sum + Default + Debug + Display + Send + Sync + 'static
{
    fn lit(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline(always)]
    fn lit(x: f64) -> Self {
        x as f32
    }
    #[inline(always)]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline(always)]
    fn lit(x: f64) -> Self {
        x
    }
    #[inline(always)]
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T: Real = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) && !data.is_empty() {
            return Err(Error::Shape(format!("zero extent in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(m * n);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != n {
                return Err(Error::Shape(format!(
                    "row {i} has {} columns, expected {n}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::new(&[m, n], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    /// Gaussian entries with the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::lit(z * std)
            })
            .collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    /// Uniform entries in `[-bound, bound)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| T::lit(rng.random_range(-bound..bound)))
            .collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows and columns of a 2-D tensor; a 1-D tensor is one row.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [n] => (1, *n),
            [m, n] => (*m, *n),
            s => (s[..s.len() - 1].iter().product(), s[s.len() - 1]),
        }
    }

    pub fn row(&self, i: usize) -> &[T] {
        let (_, n) = self.dims2();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn get2(&self, i: usize, j: usize) -> T {
        let (_, n) = self.dims2();
        self.data[i * n + j]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::lit(x.as_f64())).collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.as_f64()).collect()
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

    pub fn sum_f64(&self) -> f64 {
        self.data.iter().map(|x| x.as_f64()).sum()
    }

    pub fn transpose(&self) -> Result<Self> {
        if self.shape.len() != 2 {
            return Err(Error::Shape(format!(
                "transpose needs a matrix, got {:?}",
                self.shape
            )));
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Self {
            shape: vec![n, m],
            data: out,
        })
    }

    /// Plain matrix product, no gradient bookkeeping.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = matrix_dims(self, "matmul lhs")?;
        let (k2, n) = matrix_dims(other, "matmul rhs")?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul {:?} x {:?}: inner extents differ",
                self.shape, other.shape
            )));
        }
        Ok(Self {
            shape: vec![m, n],
            data: gemm_nn(&self.data, &other.data, m, k, n),
        })
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }
}

fn matrix_dims<T: Real>(t: &Tensor<T>, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [m, n] => Ok((*m, *n)),
        s => Err(Error::Shape(format!("{what} must be 2-D, got {s:?}"))),
    }
}

/// `C = A B` with `A: m×k`, `B: k×n`.
pub(crate) fn gemm_nn<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    let mut acc = vec![0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|x| *x = 0.0);
        let arow = &a[i * k..(i + 1) * k];
        for (p, &aip) in arow.iter().enumerate() {
            let aip = aip.as_f64();
            let brow = &b[p * n..(p + 1) * n];
            for (c, &bv) in acc.iter_mut().zip(brow) {
                *c += aip * bv.as_f64();
            }
        }
        for (o, c) in out[i * n..(i + 1) * n].iter_mut().zip(&acc) {
            *o = T::lit(*c);
        }
    }
    out
}

/// `C = A Bᵀ` with `A: m×k`, `B: n×k`.
pub(crate) fn gemm_nt<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    // Row-times-row dot products do not vectorize with an f64 accumulator;
    // transposing B first keeps the inner loop an axpy.
    let mut bt = vec![T::zero(); k * n];
    for j in 0..n {
        for p in 0..k {
            bt[p * n + j] = b[j * k + p];
        }
    }
    gemm_nn(a, &bt, m, k, n)
}

/// `C = Aᵀ B` with `A: m×k`, `B: m×n`.
pub(crate) fn gemm_tn<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut acc = vec![0f64; k * n];
    for p in 0..m {
        let arow = &a[p * k..(p + 1) * k];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let av = av.as_f64();
            for (c, &bv) in acc[i * n..(i + 1) * n].iter_mut().zip(brow) {
                *c += av * bv.as_f64();
            }
        }
    }
    acc.into_iter().map(T::lit).collect()
}
