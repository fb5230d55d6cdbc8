//! Small dense `f64` linear algebra: symmetric eigendecomposition by cyclic
//! Jacobi rotations, Cholesky factorization, SPD solves.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::Shape(format!("ragged matrix rows: {} vs {c}", row.len())));
            }
            data.extend_from_slice(row);
        }
        Ok(Self { rows: r, cols: c, data })
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    /// `u vᵀ`.
    pub fn outer(u: &[f64], v: &[f64]) -> Self {
        let mut m = Self::zeros(u.len(), v.len());
        for (i, a) in u.iter().enumerate() {
            for (j, b) in v.iter().enumerate() {
                m[(i, j)] = a * b;
            }
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| x * c).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn add_scaled(&mut self, other: &Matrix, c: f64) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "matrix product {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for p in 0..self.cols {
                let a = self[(i, p)];
                for j in 0..other.cols {
                    out.data[i * other.cols + j] += a * other[(p, j)];
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        (0..self.rows).map(|i| dot(self.row(i), v)).collect()
    }

    /// `vᵀ A v`.
    pub fn quad_form(&self, v: &[f64]) -> f64 {
        dot(v, &self.matvec(v))
    }

    pub fn max_asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.rows {
            for j in 0..i {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Eigenpairs of a symmetric matrix, eigenvalues descending.
#[derive(Clone, Debug)]
pub struct SymEigen {
    pub values: Vec<f64>,
    /// `vectors[i]` pairs with `values[i]`.
    pub vectors: Vec<Vec<f64>>,
    pub sweeps: usize,
}

/// Convergence when the off-diagonal Frobenius norm falls below this
/// fraction of the full Frobenius norm.
pub const JACOBI_REL_TOL: f64 = 1e-10;
pub const JACOBI_MAX_SWEEPS: usize = 100;

/// Cyclic Jacobi eigensolver.
///
/// Eigenvalues come back sorted descending (ties keep diagonal order) and
/// each eigenvector is signed so its largest-magnitude component is
/// positive, the lowest index winning ties.
pub fn jacobi_eigen(a: &Matrix) -> Result<SymEigen> {
    if !a.is_square() {
        return Err(Error::Shape(format!("eigensolver needs a square matrix, got {}x{}", a.rows, a.cols)));
    }
    let n = a.rows;
    let scale = a.frobenius();
    if !scale.is_finite() {
        return Err(Error::NonFinite("eigensolver input".into()));
    }
    if a.max_asymmetry() > 1e-9 * scale.max(1.0) {
        return Err(Error::Domain("eigensolver input is not symmetric".into()));
    }
    let mut m = a.clone();
    let mut v = Matrix::identity(n);
    let tol = JACOBI_REL_TOL * scale;
    let mut sweeps = 0;
    loop {
        let off = off_diagonal_norm(&m);
        if off <= tol || n < 2 {
            break;
        }
        if sweeps == JACOBI_MAX_SWEEPS {
            return Err(Error::Domain(format!(
                "Jacobi did not converge in {JACOBI_MAX_SWEEPS} sweeps (off-diagonal {off:e})"
            )));
        }
        sweeps += 1;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let apq = m[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (m[(k, p)], m[(k, q)]);
                    m[(k, p)] = c * akp - s * akq;
                    m[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (m[(p, k)], m[(q, k)]);
                    m[(p, k)] = c * apk - s * aqk;
                    m[(q, k)] = s * apk + c * aqk;
                }
                m[(p, q)] = 0.0;
                m[(q, p)] = 0.0;
                for k in 0..n {
                    let (vkp, vkq) = (v[(k, p)], v[(k, q)]);
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(j, j)].total_cmp(&m[(i, i)]));
    let values = order.iter().map(|&i| m[(i, i)]).collect();
    let vectors = order
        .iter()
        .map(|&i| {
            let mut col = v.column(i);
            canonical_sign(&mut col);
            col
        })
        .collect();
    Ok(SymEigen {
        values,
        vectors,
        sweeps,
    })
}

fn off_diagonal_norm(m: &Matrix) -> f64 {
    let mut s = 0.0;
    for i in 0..m.rows {
        for j in 0..m.cols {
            if i != j {
                s += m[(i, j)] * m[(i, j)];
            }
        }
    }
    s.sqrt()
}

/// Flips `v` so its largest-magnitude entry (lowest index on ties) is positive.
pub fn canonical_sign(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v.get(best).is_some_and(|&x| x < 0.0) {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Lower-triangular `L` with `L Lᵀ = A` for symmetric positive
/// semidefinite `A`. Zero pivots yield zero columns; a negative pivot or an
/// inconsistent column beyond round-off is an error.
pub fn cholesky_psd(a: &Matrix) -> Result<Matrix> {
    if !a.is_square() {
        return Err(Error::Shape("cholesky needs a square matrix".into()));
    }
    let n = a.rows;
    let scale = (0..n).map(|i| a[(i, i)].abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    if a.max_asymmetry() > 1e-9 * scale.max(1.0) {
        return Err(Error::Domain("matrix is not symmetric".into()));
    }
    let tol = 1e-12 * scale;
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let d = a[(j, j)] - (0..j).map(|k| l[(j, k)] * l[(j, k)]).sum::<f64>();
        if d < -tol.max(1e-14) {
            return Err(Error::Domain(format!("negative pivot {d:e} at {j}: not positive semidefinite")));
        }
        if d <= tol {
            for i in j + 1..n {
                let v = a[(i, j)] - (0..j).map(|k| l[(i, k)] * l[(j, k)]).sum::<f64>();
                if v.abs() > 1e-6 * scale {
                    return Err(Error::Domain(format!(
                        "zero pivot at {j} with off-diagonal {v:e}: not positive semidefinite"
                    )));
                }
            }
            continue;
        }
        let ljj = d.sqrt();
        l[(j, j)] = ljj;
        for i in j + 1..n {
            let v = a[(i, j)] - (0..j).map(|k| l[(i, k)] * l[(j, k)]).sum::<f64>();
            l[(i, j)] = v / ljj;
        }
    }
    Ok(l)
}

/// Solves `A x = b` for symmetric positive definite `A`.
pub fn solve_spd(a: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    let l = cholesky_psd(a)?;
    let n = a.rows;
    if b.len() != n {
        return Err(Error::Shape(format!("rhs length {} vs {n}", b.len())));
    }
    if (0..n).any(|i| l[(i, i)] == 0.0) {
        return Err(Error::Domain("matrix is singular".into()));
    }
    let mut y = vec![0.0; n];
    for i in 0..n {
        let s: f64 = (0..i).map(|k| l[(i, k)] * y[k]).sum();
        y[i] = (b[i] - s) / l[(i, i)];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| l[(k, i)] * x[k]).sum();
        x[i] = (y[i] - s) / l[(i, i)];
    }
    Ok(x)
}
