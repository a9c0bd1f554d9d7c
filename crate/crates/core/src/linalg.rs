//! Small dense real matrices and the handful of constructions the forwarding
//! design needs: integrator-chain matrices, the forwarding vector `c`,
//! definiteness tests and the quadratic-form sandwich/decay constants.
//!
//! Everything here is sized for state dimensions of at most a few units.

use std::fmt;
use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative pivot threshold used by [`Matrix::solve`].
pub const PIVOT_RTOL: f64 = 1e-12;

/// Dense row-major matrix.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MatrixRepr", into = "MatrixRepr")]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct MatrixRepr(Vec<Vec<f64>>);

impl TryFrom<MatrixRepr> for Matrix {
    type Error = Error;
    fn try_from(repr: MatrixRepr) -> Result<Self> {
        Matrix::from_rows(&repr.0)
    }
}

impl From<Matrix> for MatrixRepr {
    fn from(m: Matrix) -> Self {
        MatrixRepr((0..m.rows).map(|i| m.row(i).to_vec()).collect())
    }
}

/// Dense column vector.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vector(Vec<f64>);

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows >= 1 && cols >= 1, "matrix dimensions must be positive");
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

    pub fn diag(entries: &[f64]) -> Self {
        let mut m = Self::zeros(entries.len(), entries.len());
        for (i, &v) in entries.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    /// Builds a matrix from nested rows; rows must be non-empty, of equal
    /// length and contain only finite entries.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let nrows = rows.len();
        let ncols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        if nrows == 0 || ncols == 0 {
            return Err(Error::InvalidArgument("matrix must be at least 1x1".into()));
        }
        let mut data = Vec::with_capacity(nrows * ncols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != ncols {
                return Err(Error::DimensionMismatch {
                    expected: ncols,
                    found: r.len(),
                    context: "matrix row length",
                });
            }
            if r.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument("matrix entries must be finite".into()));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: nrows,
            cols: ncols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
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

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul dimension mismatch");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out[(i, j)] += a * other[(k, j)];
                }
            }
        }
        out
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len(), "mul_vec dimension mismatch");
        (0..self.rows)
            .map(|i| self.row(i).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|a| a * s).collect(),
        }
    }

    /// `u v'`
    pub fn outer(u: &[f64], v: &[f64]) -> Matrix {
        let mut m = Matrix::zeros(u.len(), v.len());
        for (i, a) in u.iter().enumerate() {
            for (j, b) in v.iter().enumerate() {
                m[(i, j)] = a * b;
            }
        }
        m
    }

    /// `(M + M') / 2`
    pub fn symmetric_part(&self) -> Matrix {
        assert!(self.is_square());
        self.add(&self.transpose()).scale(0.5)
    }

    /// `x' M x`
    pub fn quad_form(&self, x: &[f64]) -> f64 {
        assert!(self.is_square() && x.len() == self.rows);
        let mut s = 0.0;
        for i in 0..self.rows {
            let row = self.row(i);
            let mut acc = 0.0;
            for j in 0..self.cols {
                acc += row[j] * x[j];
            }
            s += x[i] * acc;
        }
        s
    }

    /// Induced 2-norm.
    pub fn spectral_norm(&self) -> f64 {
        let gram = self.transpose().matmul(self);
        symmetric_eigenvalues(&gram)
            .last()
            .copied()
            .unwrap_or(0.0)
            .max(0.0)
            .sqrt()
    }

    /// Solves `M x = rhs` by Gaussian elimination with partial pivoting.
    ///
    /// A pivot smaller than `PIVOT_RTOL` times the largest entry of its
    /// (original) row is treated as singular.
    pub fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        let n = self.rows;
        if !self.is_square() {
            return Err(Error::DimensionMismatch {
                expected: self.rows,
                found: self.cols,
                context: "solve requires a square matrix",
            });
        }
        if rhs.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: rhs.len(),
                context: "solve right-hand side",
            });
        }
        let mut a = self.data.clone();
        let mut b = rhs.to_vec();
        let mut row_scale: Vec<f64> = (0..n)
            .map(|i| self.row(i).iter().fold(0.0_f64, |m, v| m.max(v.abs())))
            .collect();
        for k in 0..n {
            let (p, pivot) = (k..n)
                .map(|i| (i, a[i * n + k]))
                .max_by(|x, y| x.1.abs().total_cmp(&y.1.abs()))
                .expect("non-empty pivot range");
            let threshold = PIVOT_RTOL * row_scale[p];
            if pivot.abs() <= threshold || pivot == 0.0 {
                return Err(Error::SingularMatrix {
                    pivot: pivot.abs(),
                    threshold,
                });
            }
            if p != k {
                for j in 0..n {
                    a.swap(k * n + j, p * n + j);
                }
                b.swap(k, p);
                row_scale.swap(k, p);
            }
            for i in (k + 1)..n {
                let f = a[i * n + k] / a[k * n + k];
                if f == 0.0 {
                    continue;
                }
                for j in k..n {
                    a[i * n + j] -= f * a[k * n + j];
                }
                b[i] -= f * b[k];
            }
        }
        let mut x = vec![0.0; n];
        for i in (0..n).rev() {
            let s: f64 = ((i + 1)..n).map(|j| a[i * n + j] * x[j]).sum();
            x[i] = (b[i] - s) / a[i * n + i];
        }
        Ok(x)
    }

    /// Lower-triangular `L` with `L L' = self`.
    pub fn cholesky(&self) -> Result<Matrix> {
        let n = self.rows;
        let mut l = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let mut s = self[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                if i == j {
                    if s <= 0.0 {
                        return Err(Error::NotPositiveDefinite { min_eigenvalue: s });
                    }
                    l[(i, i)] = s.sqrt();
                } else {
                    l[(i, j)] = s / l[(j, j)];
                }
            }
        }
        Ok(l)
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list()
            .entries((0..self.rows).map(|i| self.row(i)))
            .finish()
    }
}

impl Vector {
    pub fn new(entries: Vec<f64>) -> Self {
        Self(entries)
    }

    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    /// `i`-th standard basis vector of length `n`.
    pub fn basis(n: usize, i: usize) -> Self {
        let mut v = vec![0.0; n];
        v[i] = 1.0;
        Self(v)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn dot(&self, other: &[f64]) -> f64 {
        dot(&self.0, other)
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }
}

impl From<Vec<f64>> for Vector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

impl Index<usize> for Vector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl fmt::Debug for Vector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Eigenvalues of the symmetric part of a square matrix, ascending.
///
/// 1x1 and 2x2 use the characteristic polynomial; larger sizes use cyclic
/// Jacobi rotations.
pub fn symmetric_eigenvalues(m: &Matrix) -> Vec<f64> {
    assert!(m.is_square());
    let s = m.symmetric_part();
    let mut ev = match s.rows() {
        1 => vec![s[(0, 0)]],
        2 => {
            let (a, b, d) = (s[(0, 0)], s[(0, 1)], s[(1, 1)]);
            let mean = 0.5 * (a + d);
            let rad = (0.25 * (a - d) * (a - d) + b * b).sqrt();
            vec![mean - rad, mean + rad]
        }
        _ => jacobi_eigenvalues(&s),
    };
    ev.sort_by(f64::total_cmp);
    ev
}

fn jacobi_eigenvalues(s: &Matrix) -> Vec<f64> {
    let n = s.rows();
    let mut a = s.clone();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[(i, j)] * a[(i, j)])
            .sum();
        let total: f64 = a.data.iter().map(|v| v * v).sum();
        if off <= 1e-30 * total.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - sn * akq;
                    a[(k, q)] = sn * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - sn * aqk;
                    a[(q, k)] = sn * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[(i, i)]).collect()
}

/// Integrator chain of length `i`: ones on the first subdiagonal, input on
/// the first coordinate.
pub fn chain_matrices(i: usize) -> (Matrix, Vector) {
    assert!(i >= 1, "chain dimension must be at least 1");
    let mut a = Matrix::zeros(i, i);
    for k in 1..i {
        a[(k, k - 1)] = 1.0;
    }
    (a, Vector::basis(i, 0))
}

/// Closed-loop matrix `A + b p'`.
pub fn closed_loop(a: &Matrix, b: &Vector, p: &Vector) -> Matrix {
    a.add(&Matrix::outer(b.as_slice(), p.as_slice()))
}

/// `P (A + b p') + (A + b p')' P`
pub fn lyapunov_sum(pm: &Matrix, a: &Matrix, b: &Vector, p: &Vector) -> Matrix {
    let acl = closed_loop(a, b, p);
    let pa = pm.matmul(&acl);
    pa.add(&pa.transpose())
}

/// Forwarding vector `c = -(A' + p b')^{-1} e_n`.
pub fn c_vector(a: &Matrix, b: &Vector, p: &Vector) -> Result<Vector> {
    let n = a.rows();
    if !a.is_square() || b.dim() != n || p.dim() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: if b.dim() != n { b.dim() } else { p.dim() },
            context: "c_vector operands",
        });
    }
    let m = a.transpose().add(&Matrix::outer(p.as_slice(), b.as_slice()));
    let mut rhs = vec![0.0; n];
    rhs[n - 1] = -1.0;
    m.solve(&rhs).map(Vector)
}

/// Negative-definiteness test on the symmetric part. Returns the flag and the
/// largest eigenvalue of `(M + M')/2`.
pub fn is_neg_definite(m: &Matrix) -> (bool, f64) {
    let top = *symmetric_eigenvalues(m).last().expect("non-empty spectrum");
    (top < 0.0, top)
}

/// Constants `(a1, a2)` with `a1^2 x'Px <= |x|^2 <= a2^2 x'Px`.
pub fn sandwich_constants(pm: &Matrix) -> Result<(f64, f64)> {
    let ev = symmetric_eigenvalues(pm);
    let (lo, hi) = (ev[0], ev[ev.len() - 1]);
    if lo <= 0.0 {
        return Err(Error::NotPositiveDefinite { min_eigenvalue: lo });
    }
    Ok((1.0 / hi.sqrt(), 1.0 / lo.sqrt()))
}

/// Largest `q` with `x'P(A + bp')x <= -q|x|^2`.
pub fn decay_constant_q(pm: &Matrix, a: &Matrix, b: &Vector, p: &Vector) -> Result<f64> {
    let sum = lyapunov_sum(pm, a, b, p);
    let (neg, top) = is_neg_definite(&sum);
    if !neg {
        return Err(Error::NotNegativeDefinite {
            max_eigenvalue: top,
        });
    }
    Ok(-0.5 * top)
}
