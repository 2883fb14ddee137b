//! Small dense linear algebra kernel.
//!
//! Row-major `Mat` with the handful of factorizations the rest of the crate
//! needs: LU with partial pivoting, cyclic Jacobi for symmetric matrices,
//! Hessenberg + shifted QR for the spectrum of general matrices, and the
//! vectorized Lyapunov solver behind every stability certificate.
//!
//! Everything here is written for dimensions up to a few dozen. Nothing is
//! blocked or cache-tuned.

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Real part threshold below which a spectrum is not considered stable.
pub const HURWITZ_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinalgError {
    #[error("dimension mismatch: expected {expected:?}, got {got:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is numerically singular (condition estimate {cond:e})")]
    Singular { cond: f64 },
    #[error("matrix is not Hurwitz-stable: min real part {min_real_part:e}")]
    NotHurwitz { min_real_part: f64 },
    #[error("non-finite entry encountered")]
    NonFinite,
    #[error("eigenvalue iteration did not converge")]
    NoConvergence,
    #[error("ragged rows: row {row} has {got} entries, expected {expected}")]
    Ragged {
        row: usize,
        expected: usize,
        got: usize,
    },
}

pub type Result<T> = std::result::Result<T, LinalgError>;

/// Dense real matrix, row-major: `data[i * cols + j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(LinalgError::DimensionMismatch {
                expected: (rows, cols),
                got: (data.len(), 1),
            });
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(LinalgError::NonFinite);
        }
        Ok(Self { rows, cols, data })
    }

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
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn diag(d: &[f64]) -> Self {
        let n = d.len();
        let mut m = Self::zeros(n, n);
        for (i, &v) in d.iter().enumerate() {
            m.data[i * n + i] = v;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != c {
                return Err(LinalgError::Ragged {
                    row: i,
                    expected: c,
                    got: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(r, c, data)
    }

    /// Column vector view of a slice.
    pub fn col(v: &[f64]) -> Self {
        Self {
            rows: v.len(),
            cols: 1,
            data: v.to_vec(),
        }
    }

    pub fn outer(x: &[f64], y: &[f64]) -> Self {
        let mut m = Self::zeros(x.len(), y.len());
        for (i, xi) in x.iter().enumerate() {
            for (j, yj) in y.iter().enumerate() {
                m.data[i * y.len() + j] = xi * yj;
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

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(LinalgError::DimensionMismatch {
                expected: self.shape(),
                got: other.shape(),
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Self { data, ..*self })
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Self { data, ..*self })
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            data: self.data.iter().map(|x| x * s).collect(),
            ..*self
        }
    }

    /// `self + s * other`, in place.
    pub fn axpy(&mut self, s: f64, other: &Self) -> Result<()> {
        self.check_same_shape(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(LinalgError::DimensionMismatch {
                expected: (self.cols, other.cols),
                got: other.shape(),
            });
        }
        let mut out = Self::zeros(self.rows, other.cols);
        matmul_into(self, other, &mut out);
        Ok(out)
    }

    pub fn mat_vec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if self.cols != x.len() {
            return Err(LinalgError::DimensionMismatch {
                expected: (self.cols, 1),
                got: (x.len(), 1),
            });
        }
        let mut out = vec![0.0; self.rows];
        mat_vec_into(self, x, &mut out);
        Ok(out)
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).sum()
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// Induced infinity norm (max absolute row sum).
    pub fn norm_inf(&self) -> f64 {
        (0..self.rows)
            .map(|i| self.row(i).iter().map(|x| x.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    /// Induced 1-norm (max absolute column sum).
    pub fn norm_1(&self) -> f64 {
        (0..self.cols)
            .map(|j| (0..self.rows).map(|i| self.get(i, j).abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn norm_fro(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Spectral norm (largest singular value).
    pub fn op_norm(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        let gram = if self.rows >= self.cols {
            self.transpose().matmul(self).expect("shapes agree")
        } else {
            self.matmul(&self.transpose()).expect("shapes agree")
        };
        let eig = sym_eigen(&gram).expect("gram matrix is square");
        eig.values.iter().fold(0.0_f64, |m, &v| m.max(v)).max(0.0).sqrt()
    }

    pub fn symmetrize(&self) -> Self {
        let t = self.transpose();
        let mut s = self.add(&t).expect("square");
        s.data.iter_mut().for_each(|x| *x *= 0.5);
        s
    }

    /// Max absolute asymmetry `|a_ij - a_ji|`.
    pub fn asymmetry(&self) -> f64 {
        let mut m = 0.0_f64;
        for i in 0..self.rows {
            for j in 0..i {
                m = m.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        m
    }

    /// Kronecker product.
    pub fn kron(&self, other: &Self) -> Self {
        let (r1, c1) = self.shape();
        let (r2, c2) = other.shape();
        let mut out = Self::zeros(r1 * r2, c1 * c2);
        for i in 0..r1 {
            for j in 0..c1 {
                let a = self.get(i, j);
                for k in 0..r2 {
                    for l in 0..c2 {
                        out.set(i * r2 + k, j * c2 + l, a * other.get(k, l));
                    }
                }
            }
        }
        out
    }
}

impl Serialize for Mat {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_rows().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Mat {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        Mat::from_rows(&rows).map_err(serde::de::Error::custom)
    }
}

/// `out = a * b` without allocation. Shapes are the caller's responsibility.
#[inline]
pub fn matmul_into(a: &Mat, b: &Mat, out: &mut Mat) {
    debug_assert_eq!(a.cols, b.rows);
    debug_assert_eq!(out.shape(), (a.rows, b.cols));
    let (n, m, p) = (a.rows, a.cols, b.cols);
    for i in 0..n {
        let orow = &mut out.data[i * p..(i + 1) * p];
        orow.iter_mut().for_each(|x| *x = 0.0);
        for k in 0..m {
            let aik = a.data[i * m + k];
            if aik == 0.0 {
                continue;
            }
            let brow = &b.data[k * p..(k + 1) * p];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
}

/// `out = a * x` without allocation.
#[inline]
pub fn mat_vec_into(a: &Mat, x: &[f64], out: &mut [f64]) {
    debug_assert_eq!(a.cols, x.len());
    for (i, o) in out.iter_mut().enumerate() {
        *o = a.row(i).iter().zip(x).map(|(p, q)| p * q).sum();
    }
}

pub fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

pub fn norm2(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

pub fn norm_inf_vec(x: &[f64]) -> f64 {
    x.iter().fold(0.0, |m, v| m.max(v.abs()))
}

// ---------------------------------------------------------------------------
// LU

/// LU factorization with partial pivoting, `P A = L U`.
#[derive(Debug, Clone)]
pub struct Lu {
    lu: Mat,
    piv: Vec<usize>,
    singular: bool,
}

impl Lu {
    pub fn new(a: &Mat) -> Result<Self> {
        if !a.is_square() {
            return Err(LinalgError::NotSquare {
                rows: a.rows,
                cols: a.cols,
            });
        }
        let n = a.rows;
        let mut lu = a.clone();
        let mut piv: Vec<usize> = (0..n).collect();
        let mut singular = false;
        let scale = a.max_abs().max(f64::MIN_POSITIVE);
        for k in 0..n {
            let (p, pmax) = (k..n)
                .map(|i| (i, lu.get(i, k).abs()))
                .fold((k, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc });
            if pmax <= scale * 1e-300 {
                singular = true;
                continue;
            }
            if p != k {
                piv.swap(p, k);
                for j in 0..n {
                    let t = lu.get(k, j);
                    lu.set(k, j, lu.get(p, j));
                    lu.set(p, j, t);
                }
            }
            let pivot = lu.get(k, k);
            for i in k + 1..n {
                let f = lu.get(i, k) / pivot;
                lu.set(i, k, f);
                if f != 0.0 {
                    for j in k + 1..n {
                        let v = lu.get(i, j) - f * lu.get(k, j);
                        lu.set(i, j, v);
                    }
                }
            }
        }
        Ok(Self { lu, piv, singular })
    }

    pub fn is_singular(&self) -> bool {
        self.singular
    }

    pub fn solve_vec(&self, b: &[f64]) -> Result<Vec<f64>> {
        let n = self.lu.rows;
        if b.len() != n {
            return Err(LinalgError::DimensionMismatch {
                expected: (n, 1),
                got: (b.len(), 1),
            });
        }
        if self.singular {
            return Err(LinalgError::Singular { cond: f64::INFINITY });
        }
        let mut x: Vec<f64> = self.piv.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let s: f64 = (0..i).map(|j| self.lu.get(i, j) * x[j]).sum();
            x[i] -= s;
        }
        for i in (0..n).rev() {
            let s: f64 = (i + 1..n).map(|j| self.lu.get(i, j) * x[j]).sum();
            x[i] = (x[i] - s) / self.lu.get(i, i);
        }
        Ok(x)
    }

    pub fn solve_mat(&self, b: &Mat) -> Result<Mat> {
        let n = self.lu.rows;
        if b.rows != n {
            return Err(LinalgError::DimensionMismatch {
                expected: (n, b.cols),
                got: b.shape(),
            });
        }
        let mut out = Mat::zeros(n, b.cols);
        let mut col = vec![0.0; n];
        for j in 0..b.cols {
            for (i, c) in col.iter_mut().enumerate() {
                *c = b.get(i, j);
            }
            let x = self.solve_vec(&col)?;
            for (i, v) in x.into_iter().enumerate() {
                out.set(i, j, v);
            }
        }
        Ok(out)
    }

    pub fn inverse(&self) -> Result<Mat> {
        self.solve_mat(&Mat::identity(self.lu.rows))
    }
}

/// 1-norm condition number, via the explicit inverse.
pub fn cond_1(a: &Mat) -> Result<f64> {
    let lu = Lu::new(a)?;
    if lu.is_singular() {
        return Ok(f64::INFINITY);
    }
    let inv = lu.inverse()?;
    Ok(a.norm_1() * inv.norm_1())
}

/// Inverse with a condition-number guard.
pub fn inverse_guarded(a: &Mat, max_cond: f64) -> Result<Mat> {
    let lu = Lu::new(a)?;
    if lu.is_singular() {
        return Err(LinalgError::Singular {
            cond: f64::INFINITY,
        });
    }
    let inv = lu.inverse()?;
    let cond = a.norm_1() * inv.norm_1();
    if !(cond <= max_cond) {
        return Err(LinalgError::Singular { cond });
    }
    Ok(inv)
}

pub fn solve(a: &Mat, b: &[f64]) -> Result<Vec<f64>> {
    Lu::new(a)?.solve_vec(b)
}

// ---------------------------------------------------------------------------
// Symmetric eigendecomposition (cyclic Jacobi)

#[derive(Debug, Clone)]
pub struct SymEigen {
    /// Eigenvalues in ascending order.
    pub values: Vec<f64>,
    /// Eigenvectors as columns, matching `values`.
    pub vectors: Mat,
}

pub fn sym_eigen(a: &Mat) -> Result<SymEigen> {
    if !a.is_square() {
        return Err(LinalgError::NotSquare {
            rows: a.rows,
            cols: a.cols,
        });
    }
    let n = a.rows;
    let mut m = a.symmetrize();
    let mut v = Mat::identity(n);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m.get(i, j).powi(2))
            .sum();
        let diag: f64 = (0..n).map(|i| m.get(i, i).powi(2)).sum();
        if off <= 1e-30 * diag.max(f64::MIN_POSITIVE) || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let app = m.get(p, p);
                let aqq = m.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m.get(k, p);
                    let mkq = m.get(k, q);
                    m.set(k, p, c * mkp - s * mkq);
                    m.set(k, q, s * mkp + c * mkq);
                }
                for k in 0..n {
                    let mpk = m.get(p, k);
                    let mqk = m.get(q, k);
                    m.set(p, k, c * mpk - s * mqk);
                    m.set(q, k, s * mpk + c * mqk);
                }
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m.get(i, i).total_cmp(&m.get(j, j)));
    let values = order.iter().map(|&i| m.get(i, i)).collect();
    let mut vectors = Mat::zeros(n, n);
    for (newj, &oldj) in order.iter().enumerate() {
        for k in 0..n {
            vectors.set(k, newj, v.get(k, oldj));
        }
    }
    Ok(SymEigen { values, vectors })
}

/// Applies `f` to the spectrum of a symmetric matrix.
pub fn sym_fn(a: &Mat, f: impl Fn(f64) -> f64) -> Result<Mat> {
    let e = sym_eigen(a)?;
    let n = a.rows;
    let mut out = Mat::zeros(n, n);
    for k in 0..n {
        let fk = f(e.values[k]);
        for i in 0..n {
            let vik = e.vectors.get(i, k) * fk;
            for j in 0..n {
                let v = out.get(i, j) + vik * e.vectors.get(j, k);
                out.set(i, j, v);
            }
        }
    }
    Ok(out)
}

pub fn sym_sqrt(a: &Mat) -> Result<Mat> {
    sym_fn(a, |x| x.max(0.0).sqrt())
}

pub fn lambda_min(a: &Mat) -> Result<f64> {
    Ok(sym_eigen(a)?.values.first().copied().unwrap_or(0.0))
}

pub fn lambda_max(a: &Mat) -> Result<f64> {
    Ok(sym_eigen(a)?.values.last().copied().unwrap_or(0.0))
}

// ---------------------------------------------------------------------------
// General eigenvalues: balance, Hessenberg reduction, shifted QR (hqr)

/// Eigenvalues `(re, im)` of a general real square matrix.
pub fn eigenvalues(a: &Mat) -> Result<Vec<(f64, f64)>> {
    if !a.is_square() {
        return Err(LinalgError::NotSquare {
            rows: a.rows,
            cols: a.cols,
        });
    }
    let n = a.rows;
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut h: Vec<Vec<f64>> = a.to_rows();
    balance(&mut h);
    hessenberg(&mut h);
    hqr(&mut h)
}

fn balance(a: &mut [Vec<f64>]) {
    const RADIX: f64 = 2.0;
    let sqrdx = RADIX * RADIX;
    let n = a.len();
    let mut done = false;
    while !done {
        done = true;
        for i in 0..n {
            let mut r = 0.0;
            let mut c = 0.0;
            for j in 0..n {
                if j != i {
                    c += a[j][i].abs();
                    r += a[i][j].abs();
                }
            }
            if c != 0.0 && r != 0.0 {
                let mut g = r / RADIX;
                let mut f = 1.0;
                let s = c + r;
                while c < g {
                    f *= RADIX;
                    c *= sqrdx;
                }
                g = r * RADIX;
                while c > g {
                    f /= RADIX;
                    c /= sqrdx;
                }
                if (c + r) / f < 0.95 * s {
                    done = false;
                    let g = 1.0 / f;
                    for j in 0..n {
                        a[i][j] *= g;
                    }
                    for row in a.iter_mut() {
                        row[i] *= f;
                    }
                }
            }
        }
    }
}

/// Reduction to upper Hessenberg form by stabilized elementary similarity
/// transforms. Entries below the subdiagonal are zeroed on return.
fn hessenberg(a: &mut [Vec<f64>]) {
    let n = a.len();
    for m in 1..n.saturating_sub(1) {
        let mut x = 0.0_f64;
        let mut i = m;
        for j in m..n {
            if a[j][m - 1].abs() > x.abs() {
                x = a[j][m - 1];
                i = j;
            }
        }
        if i != m {
            for j in (m - 1)..n {
                let t = a[i][j];
                a[i][j] = a[m][j];
                a[m][j] = t;
            }
            for row in a.iter_mut() {
                row.swap(i, m);
            }
        }
        if x != 0.0 {
            for i in (m + 1)..n {
                let mut y = a[i][m - 1];
                if y != 0.0 {
                    y /= x;
                    a[i][m - 1] = y;
                    for j in m..n {
                        a[i][j] -= y * a[m][j];
                    }
                    for row in a.iter_mut() {
                        row[m] += y * row[i];
                    }
                }
            }
        }
    }
    for i in 0..n {
        for j in 0..i.saturating_sub(1) {
            a[i][j] = 0.0;
        }
    }
}

fn sign(a: f64, b: f64) -> f64 {
    if b >= 0.0 {
        a.abs()
    } else {
        -a.abs()
    }
}

/// Francis double-shift QR on an upper Hessenberg matrix.
#[allow(clippy::many_single_char_names)]
fn hqr(a: &mut [Vec<f64>]) -> Result<Vec<(f64, f64)>> {
    let n = a.len() as isize;
    let mut wr = vec![0.0; n as usize];
    let mut wi = vec![0.0; n as usize];
    let mut anorm = 0.0;
    for i in 0..n as usize {
        for j in i.saturating_sub(1)..n as usize {
            anorm += a[i][j].abs();
        }
    }
    let at = |a: &[Vec<f64>], i: isize, j: isize| a[i as usize][j as usize];
    let mut nn = n - 1;
    let mut t = 0.0;
    let (mut p, mut q, mut r) = (0.0, 0.0, 0.0);
    let (mut x, mut y, mut z);
    while nn >= 0 {
        let mut its = 0;
        let mut l;
        loop {
            l = nn;
            while l >= 1 {
                let mut s = at(a, l - 1, l - 1).abs() + at(a, l, l).abs();
                if s == 0.0 {
                    s = anorm;
                }
                if at(a, l, l - 1).abs() + s == s {
                    a[l as usize][(l - 1) as usize] = 0.0;
                    break;
                }
                l -= 1;
            }
            x = at(a, nn, nn);
            if l == nn {
                wr[nn as usize] = x + t;
                wi[nn as usize] = 0.0;
                nn -= 1;
            } else {
                y = at(a, nn - 1, nn - 1);
                let mut w = at(a, nn, nn - 1) * at(a, nn - 1, nn);
                if l == nn - 1 {
                    p = 0.5 * (y - x);
                    q = p * p + w;
                    z = q.abs().sqrt();
                    x += t;
                    if q >= 0.0 {
                        z = p + sign(z, p);
                        wr[(nn - 1) as usize] = x + z;
                        wr[nn as usize] = x + z;
                        if z != 0.0 {
                            wr[nn as usize] = x - w / z;
                        }
                        wi[(nn - 1) as usize] = 0.0;
                        wi[nn as usize] = 0.0;
                    } else {
                        wr[(nn - 1) as usize] = x + p;
                        wr[nn as usize] = x + p;
                        wi[(nn - 1) as usize] = -z;
                        wi[nn as usize] = z;
                    }
                    nn -= 2;
                } else {
                    if its == 60 {
                        return Err(LinalgError::NoConvergence);
                    }
                    if its == 10 || its == 20 || its == 40 {
                        t += x;
                        for i in 0..=nn {
                            a[i as usize][i as usize] -= x;
                        }
                        let s = at(a, nn, nn - 1).abs() + at(a, nn - 1, nn - 2).abs();
                        x = 0.75 * s;
                        y = x;
                        w = -0.4375 * s * s;
                    }
                    its += 1;
                    let mut m = nn - 2;
                    while m >= l {
                        z = at(a, m, m);
                        r = x - z;
                        let s = y - z;
                        p = (r * s - w) / at(a, m + 1, m) + at(a, m, m + 1);
                        q = at(a, m + 1, m + 1) - z - r - s;
                        r = at(a, m + 2, m + 1);
                        let s = p.abs() + q.abs() + r.abs();
                        p /= s;
                        q /= s;
                        r /= s;
                        if m == l {
                            break;
                        }
                        let u = at(a, m, m - 1).abs() * (q.abs() + r.abs());
                        let v = p.abs()
                            * (at(a, m - 1, m - 1).abs() + z.abs() + at(a, m + 1, m + 1).abs());
                        if u + v == v {
                            break;
                        }
                        m -= 1;
                    }
                    for i in (m + 2)..=nn {
                        a[i as usize][(i - 2) as usize] = 0.0;
                        if i != m + 2 {
                            a[i as usize][(i - 3) as usize] = 0.0;
                        }
                    }
                    let mut k = m;
                    while k <= nn - 1 {
                        if k != m {
                            p = at(a, k, k - 1);
                            q = at(a, k + 1, k - 1);
                            r = 0.0;
                            if k != nn - 1 {
                                r = at(a, k + 2, k - 1);
                            }
                            x = p.abs() + q.abs() + r.abs();
                            if x != 0.0 {
                                p /= x;
                                q /= x;
                                r /= x;
                            }
                        }
                        let s = sign((p * p + q * q + r * r).sqrt(), p);
                        if s != 0.0 {
                            if k == m {
                                if l != m {
                                    a[k as usize][(k - 1) as usize] =
                                        -a[k as usize][(k - 1) as usize];
                                }
                            } else {
                                a[k as usize][(k - 1) as usize] = -s * x;
                            }
                            p += s;
                            x = p / s;
                            y = q / s;
                            z = r / s;
                            q /= p;
                            r /= p;
                            for j in k..=nn {
                                let (ku, ju) = (k as usize, j as usize);
                                p = a[ku][ju] + q * a[ku + 1][ju];
                                if k != nn - 1 {
                                    p += r * a[ku + 2][ju];
                                    a[ku + 2][ju] -= p * z;
                                }
                                a[ku + 1][ju] -= p * y;
                                a[ku][ju] -= p * x;
                            }
                            let mmin = if nn < k + 3 { nn } else { k + 3 };
                            for i in l..=mmin {
                                let (iu, ku) = (i as usize, k as usize);
                                p = x * a[iu][ku] + y * a[iu][ku + 1];
                                if k != nn - 1 {
                                    p += z * a[iu][ku + 2];
                                    a[iu][ku + 2] -= p * r;
                                }
                                a[iu][ku + 1] -= p * q;
                                a[iu][ku] -= p;
                            }
                        }
                        k += 1;
                    }
                }
            }
            if l >= nn - 1 {
                break;
            }
        }
    }
    Ok(wr.into_iter().zip(wi).collect())
}

// ---------------------------------------------------------------------------
// Stability

/// Result of a spectral stability check of `-a`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HurwitzCheck {
    /// `true` iff every eigenvalue of `a` has real part above [`HURWITZ_TOL`].
    pub stable: bool,
    pub min_real_part: f64,
}

/// Checks that `-a` is Hurwitz, i.e. every eigenvalue of `a` has positive real part.
pub fn eig_check_hurwitz(a: &Mat) -> HurwitzCheck {
    match eigenvalues(a) {
        Ok(ev) => {
            let min_re = ev.iter().map(|e| e.0).fold(f64::INFINITY, f64::min);
            HurwitzCheck {
                stable: min_re > HURWITZ_TOL,
                min_real_part: min_re,
            }
        }
        Err(_) => HurwitzCheck {
            stable: false,
            min_real_part: f64::NAN,
        },
    }
}

/// Solves `a^T X + X a = c` for square `a` through the Kronecker system
/// `(I ⊗ a^T + a^T ⊗ I) vec(X) = vec(c)`, followed by one step of
/// iterative refinement.
pub fn solve_sylvester_transposed(a: &Mat, c: &Mat) -> Result<Mat> {
    if !a.is_square() {
        return Err(LinalgError::NotSquare {
            rows: a.rows,
            cols: a.cols,
        });
    }
    let d = a.rows;
    if c.shape() != (d, d) {
        return Err(LinalgError::DimensionMismatch {
            expected: (d, d),
            got: c.shape(),
        });
    }
    let mut k = Mat::zeros(d * d, d * d);
    for i in 0..d {
        for j in 0..d {
            let row = i * d + j;
            for l in 0..d {
                // (a^T X)_{ij} = sum_l a_{li} X_{lj}
                let v = k.get(row, l * d + j) + a.get(l, i);
                k.set(row, l * d + j, v);
                // (X a)_{ij} = sum_l X_{il} a_{lj}
                let v = k.get(row, i * d + l) + a.get(l, j);
                k.set(row, i * d + l, v);
            }
        }
    }
    let lu = Lu::new(&k)?;
    if lu.is_singular() {
        return Err(LinalgError::Singular {
            cond: f64::INFINITY,
        });
    }
    let rhs = c.as_slice().to_vec();
    let x = lu.solve_vec(&rhs)?;
    let mut xm = Mat::new(d, d, x)?;
    let resid = c.sub(&lyapunov_apply(a, &xm))?;
    let dx = lu.solve_vec(resid.as_slice())?;
    xm.axpy(1.0, &Mat::new(d, d, dx)?)?;
    Ok(xm)
}

/// `a^T X + X a`.
pub fn lyapunov_apply(a: &Mat, x: &Mat) -> Mat {
    let at = a.transpose();
    at.matmul(x)
        .expect("square")
        .add(&x.matmul(a).expect("square"))
        .expect("square")
}

/// Lyapunov stability certificate for a matrix `a` with `-a` Hurwitz.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LyapunovCertificate {
    /// Solution of `a^T Q + Q a = I`; symmetric positive definite.
    pub q: Mat,
    /// `1 / (2 ||Q||)`.
    pub contraction_rate: f64,
    /// `1 / (2 ||Q|| ||a||_Q^2)`.
    pub max_step: f64,
}

impl LyapunovCertificate {
    /// Condition number `lambda_max(Q) / lambda_min(Q)`.
    pub fn kappa(&self) -> f64 {
        let e = sym_eigen(&self.q).expect("square");
        e.values.last().copied().unwrap_or(1.0) / e.values[0]
    }

    pub fn q_norm(&self) -> f64 {
        lambda_max(&self.q).expect("square")
    }
}

pub fn solve_lyapunov(a: &Mat) -> Result<LyapunovCertificate> {
    if !a.is_square() {
        return Err(LinalgError::NotSquare {
            rows: a.rows,
            cols: a.cols,
        });
    }
    let check = eig_check_hurwitz(a);
    if !check.stable {
        return Err(LinalgError::NotHurwitz {
            min_real_part: check.min_real_part,
        });
    }
    let q = solve_sylvester_transposed(a, &Mat::identity(a.rows))?.symmetrize();
    let q_norm = lambda_max(&q)?;
    let a_q = q_op_norm(a, &q)?;
    Ok(LyapunovCertificate {
        contraction_rate: 1.0 / (2.0 * q_norm),
        max_step: 1.0 / (2.0 * q_norm * a_q * a_q),
        q,
    })
}

/// `sqrt(x^T q x)`.
pub fn q_norm(x: &[f64], q: &Mat) -> Result<f64> {
    if q.rows != x.len() || q.cols != x.len() {
        return Err(LinalgError::DimensionMismatch {
            expected: (x.len(), x.len()),
            got: q.shape(),
        });
    }
    let qx = q.mat_vec(x)?;
    Ok(dot(x, &qx).max(0.0).sqrt())
}

/// Induced `Q`-norm `sup ||b x||_Q / ||x||_Q`, evaluated as the largest
/// singular value of `Q^{1/2} b Q^{-1/2}`.
pub fn q_op_norm(b: &Mat, q: &Mat) -> Result<f64> {
    if !b.is_square() || b.shape() != q.shape() {
        return Err(LinalgError::DimensionMismatch {
            expected: q.shape(),
            got: b.shape(),
        });
    }
    let e = sym_eigen(q)?;
    let sq = sym_fn(q, |x| x.max(0.0).sqrt())?;
    if e.values.first().map_or(true, |&v| v <= 0.0) {
        return Err(LinalgError::Singular {
            cond: f64::INFINITY,
        });
    }
    let isq = sym_fn(q, |x| 1.0 / x.sqrt())?;
    Ok(sq.matmul(b)?.matmul(&isq)?.op_norm())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn m(rows: &[&[f64]]) -> Mat {
        Mat::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    /// `Q = ∫_0^∞ e^{-a^T t} e^{-a t} dt`, by composite Simpson on a
    /// truncated horizon with the matrix exponential from a Taylor series.
    fn lyapunov_quadrature(a: &Mat, horizon: f64, steps: usize) -> Mat {
        let d = a.rows();
        let h = horizon / steps as f64;
        // one-step propagator e^{-a h} by scaling-and-squaring Taylor
        let mut e = Mat::identity(d);
        let small = a.scale(-h / 1024.0);
        let mut term = Mat::identity(d);
        for k in 1..20 {
            term = term.matmul(&small).unwrap().scale(1.0 / k as f64);
            e = e.add(&term).unwrap();
        }
        for _ in 0..10 {
            e = e.matmul(&e).unwrap();
        }
        let mut acc = Mat::zeros(d, d);
        let mut cur = Mat::identity(d);
        for i in 0..=steps {
            let w = if i == 0 || i == steps {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            let f = cur.transpose().matmul(&cur).unwrap();
            acc.axpy(w * h / 3.0, &f).unwrap();
            cur = cur.matmul(&e).unwrap();
        }
        acc
    }

    #[test]
    fn lyapunov_scalar() {
        let c = solve_lyapunov(&m(&[&[1.0]])).unwrap();
        assert_relative_eq!(c.q.get(0, 0), 0.5, epsilon = 1e-14);
        assert_relative_eq!(c.contraction_rate, 1.0, epsilon = 1e-12);
        assert_relative_eq!(c.max_step, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn lyapunov_identity_any_dim() {
        for d in 1..6 {
            let c = solve_lyapunov(&Mat::identity(d)).unwrap();
            let expect = Mat::identity(d).scale(0.5);
            assert!(c.q.sub(&expect).unwrap().max_abs() < 1e-14);
        }
    }

    #[test]
    fn lyapunov_triangular_matches_quadrature() {
        let a = m(&[&[2.0, 1.0], &[0.0, 3.0]]);
        let c = solve_lyapunov(&a).unwrap();
        let resid = lyapunov_apply(&a, &c.q).sub(&Mat::identity(2)).unwrap();
        assert!(resid.max_abs() <= 1e-10);
        let oracle = lyapunov_quadrature(&a, 20.0, 20_000);
        assert!(c.q.sub(&oracle).unwrap().max_abs() < 1e-8, "{:?} vs {:?}", c.q, oracle);

        // q_norm of (2,-1) against the oracle Q
        let x = [2.0, -1.0];
        let want = dot(&x, &oracle.mat_vec(&x).unwrap()).sqrt();
        assert_relative_eq!(q_norm(&x, &c.q).unwrap(), want, epsilon = 1e-8);
    }

    #[test]
    fn not_hurwitz_is_rejected() {
        let err = solve_lyapunov(&m(&[&[0.0, 1.0], &[-1.0, 0.0]])).unwrap_err();
        assert!(matches!(err, LinalgError::NotHurwitz { .. }));
        let err = solve_lyapunov(&m(&[&[-1.0]])).unwrap_err();
        assert!(matches!(err, LinalgError::NotHurwitz { .. }));
    }

    #[test]
    fn q_norm_examples() {
        assert_relative_eq!(q_norm(&[1.0, 0.0], &Mat::identity(2)).unwrap(), 1.0);
        let q = Mat::diag(&[4.0, 9.0]);
        assert_relative_eq!(q_norm(&[1.0, 1.0], &q).unwrap(), 13f64.sqrt(), epsilon = 1e-15);
        assert!(matches!(
            q_norm(&[1.0], &q),
            Err(LinalgError::DimensionMismatch { .. })
        ));
    }

    /// Power iteration on `M^T M`.
    fn power_iteration_norm(mm: &Mat) -> f64 {
        let g = mm.transpose().matmul(mm).unwrap();
        let mut v = vec![1.0; g.rows()];
        v[0] = 0.3;
        let mut lam = 0.0;
        for _ in 0..500 {
            let w = g.mat_vec(&v).unwrap();
            lam = norm2(&w);
            v = w.iter().map(|x| x / lam).collect();
        }
        lam.sqrt()
    }

    #[test]
    fn q_op_norm_examples() {
        let q = Mat::diag(&[1.0, 5.0]);
        assert_relative_eq!(q_op_norm(&Mat::identity(2), &q).unwrap(), 1.0, epsilon = 1e-14);
        assert_relative_eq!(
            q_op_norm(&Mat::identity(2).scale(2.0), &q).unwrap(),
            2.0,
            epsilon = 1e-14
        );
        let b = m(&[&[0.0, 1.0], &[0.0, 0.0]]);
        let q = Mat::diag(&[1.0, 4.0]);
        let oracle = power_iteration_norm(
            &Mat::diag(&[1.0, 2.0])
                .matmul(&b)
                .unwrap()
                .matmul(&Mat::diag(&[1.0, 0.5]))
                .unwrap(),
        );
        let got = q_op_norm(&b, &q).unwrap();
        assert_relative_eq!(oracle, 0.5, epsilon = 1e-12);
        assert_relative_eq!(got, oracle, epsilon = 1e-12);
        assert!(matches!(
            q_op_norm(&Mat::identity(3), &q),
            Err(LinalgError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn hurwitz_examples() {
        let c = eig_check_hurwitz(&Mat::identity(3));
        assert!(c.stable);
        assert_relative_eq!(c.min_real_part, 1.0, epsilon = 1e-12);
        let c = eig_check_hurwitz(&m(&[&[0.0, 1.0], &[-1.0, 0.0]]));
        assert!(!c.stable);
        assert!(c.min_real_part.abs() < 1e-12);
        let c = eig_check_hurwitz(&m(&[&[2.0, 1.0], &[0.0, 3.0]]));
        assert!(c.stable);
        assert_relative_eq!(c.min_real_part, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn eigenvalues_of_companion_matrix() {
        // roots of (x-1)(x-2)(x-3)(x^2+1)
        // x^5 - 6x^4 + 12x^3 - 12x^2 + 11x - 6
        let coeffs = [-6.0, 11.0, -12.0, 12.0, -6.0];
        let mut c = Mat::zeros(5, 5);
        for i in 1..5 {
            c.set(i, i - 1, 1.0);
        }
        for i in 0..5 {
            c.set(i, 4, -coeffs[i]);
        }
        let mut ev = eigenvalues(&c).unwrap();
        ev.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        let want = [(0.0, -1.0), (0.0, 1.0), (1.0, 0.0), (2.0, 0.0), (3.0, 0.0)];
        for (g, w) in ev.iter().zip(want) {
            assert!((g.0 - w.0).abs() < 1e-9 && (g.1 - w.1).abs() < 1e-9, "{ev:?}");
        }
    }

    #[test]
    fn sym_eigen_reconstructs() {
        let a = m(&[&[4.0, 1.0, 0.5], &[1.0, 3.0, 0.2], &[0.5, 0.2, 1.0]]);
        let e = sym_eigen(&a).unwrap();
        let rec = sym_fn(&a, |x| x).unwrap();
        assert!(rec.sub(&a).unwrap().max_abs() < 1e-13);
        assert!(e.values.windows(2).all(|w| w[0] <= w[1]));
        let s = sym_sqrt(&a).unwrap();
        assert!(s.matmul(&s).unwrap().sub(&a).unwrap().max_abs() < 1e-13);
    }

    #[test]
    fn lu_solve_and_inverse() {
        let a = m(&[&[0.0, 2.0, 1.0], &[1.0, 1.0, 0.0], &[3.0, 0.0, 1.0]]);
        let x = solve(&a, &[1.0, 2.0, 3.0]).unwrap();
        let ax = a.mat_vec(&x).unwrap();
        for (g, w) in ax.iter().zip([1.0, 2.0, 3.0]) {
            assert_relative_eq!(*g, w, epsilon = 1e-14);
        }
        let inv = Lu::new(&a).unwrap().inverse().unwrap();
        assert!(a.matmul(&inv).unwrap().sub(&Mat::identity(3)).unwrap().max_abs() < 1e-14);
        let sing = m(&[&[1.0, 2.0], &[2.0, 4.0]]);
        assert!(inverse_guarded(&sing, 1e12).is_err());
    }

    #[test]
    fn kron_shape_and_values() {
        let a = m(&[&[1.0, 2.0]]);
        let b = m(&[&[0.0], &[1.0]]);
        let k = a.kron(&b);
        assert_eq!(k.shape(), (2, 2));
        assert_eq!(k.to_rows(), vec![vec![0.0, 0.0], vec![1.0, 2.0]]);
    }
}
