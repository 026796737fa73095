//! Dense real linear algebra used by the rest of the crate.
//!
//! Matrices are small (state and control dimensions in the single digits),
//! so everything here is a straightforward row-major implementation. Singular
//! values come from a one-sided Jacobi sweep, which is accurate to a few ulps
//! relative to the largest singular value.

use std::fmt;
use std::ops::{Add, AddAssign, Index, IndexMut, Mul, Neg, Sub, SubAssign};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Smallest admissible singular value before a solve is refused.
pub const RANK_THRESHOLD: f64 = 1e-8;

const MAX_JACOBI_SWEEPS: usize = 80;

/// Dense row-major real matrix.
#[derive(Clone, PartialEq)]
pub struct Mat<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Mat<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Mat{}x{}", self.rows, self.cols)?;
        f.debug_list()
            .entries(self.data.chunks(self.cols.max(1)))
            .finish()
    }
}

impl<T: Real> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn from_diag(diag: &[T]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    /// Builds a matrix from row-major entries, rejecting non-finite values.
    pub fn from_row_major(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Mat::from_row_major",
                format!("{} entries for a {rows}x{cols} matrix", data.len()),
            ));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("non-finite matrix entry".into()));
        }
        Ok(Mat { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::shape("Mat::from_rows", "ragged rows"));
        }
        Self::from_row_major(r, c, rows.concat())
    }

    /// Column vector `v` as an `n x 1` matrix.
    pub fn column(v: &[T]) -> Self {
        Mat {
            rows: v.len(),
            cols: 1,
            data: v.to_vec(),
        }
    }

    /// Outer product `a b^T`.
    pub fn outer(a: &[T], b: &[T]) -> Self {
        let mut m = Self::zeros(a.len(), b.len());
        for (i, &ai) in a.iter().enumerate() {
            for (j, &bj) in b.iter().enumerate() {
                m.data[i * b.len() + j] = ai * bj;
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

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<T>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn to_f64_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows)
            .map(|i| self.row(i).iter().map(|x| x.as_f64()).collect())
            .collect()
    }

    /// Lossy conversion into another scalar type.
    pub fn cast<U: Real>(&self) -> Mat<U> {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| U::lit(x.as_f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
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

    pub fn scale(&self, s: T) -> Self {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| x * s).collect(),
        }
    }

    pub fn frobenius_norm(&self) -> T {
        self.data.iter().map(|&x| x * x).sum::<T>().sqrt()
    }

    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |acc, &x| if x.abs() > acc { x.abs() } else { acc })
    }

    /// `self * v`.
    pub fn matvec(&self, v: &[T]) -> Vec<T> {
        assert_eq!(v.len(), self.cols, "matvec dimension mismatch");
        (0..self.rows)
            .map(|i| dot(self.row(i), v))
            .collect()
    }

    /// `out = self * v` without allocating.
    pub fn matvec_into(&self, v: &[T], out: &mut [T]) {
        assert_eq!((v.len(), out.len()), (self.cols, self.rows), "matvec dimension mismatch");
        for (i, o) in out.iter_mut().enumerate() {
            *o = dot(self.row(i), v);
        }
    }

    /// `out += self * v` without allocating.
    pub fn matvec_add(&self, v: &[T], out: &mut [T]) {
        assert_eq!((v.len(), out.len()), (self.cols, self.rows), "matvec dimension mismatch");
        for (i, o) in out.iter_mut().enumerate() {
            *o = *o + dot(self.row(i), v);
        }
    }

    /// `self^T * v`.
    pub fn tmatvec(&self, v: &[T]) -> Vec<T> {
        assert_eq!(v.len(), self.rows, "tmatvec dimension mismatch");
        let mut out = vec![T::zero(); self.cols];
        for (i, &vi) in v.iter().enumerate() {
            for (o, &a) in out.iter_mut().zip(self.row(i)) {
                *o = *o + a * vi;
            }
        }
        out
    }

    /// Adds `s * a b^T` in place.
    pub fn add_outer(&mut self, s: T, a: &[T], b: &[T]) {
        assert_eq!((a.len(), b.len()), (self.rows, self.cols));
        for (i, &ai) in a.iter().enumerate() {
            let f = s * ai;
            for (x, &bj) in self.data[i * self.cols..(i + 1) * self.cols]
                .iter_mut()
                .zip(b)
            {
                *x = *x + f * bj;
            }
        }
    }

    /// Horizontal concatenation `[m_0, m_1, ...]`.
    pub fn hcat(blocks: &[Mat<T>]) -> Result<Self> {
        let Some(first) = blocks.first() else {
            return Err(Error::shape("Mat::hcat", "no blocks"));
        };
        let rows = first.rows;
        if blocks.iter().any(|b| b.rows != rows) {
            return Err(Error::shape("Mat::hcat", "blocks differ in row count"));
        }
        let cols = blocks.iter().map(|b| b.cols).sum();
        let mut out = Self::zeros(rows, cols);
        let mut offset = 0;
        for b in blocks {
            for i in 0..rows {
                out.data[i * cols + offset..i * cols + offset + b.cols]
                    .copy_from_slice(b.row(i));
            }
            offset += b.cols;
        }
        Ok(out)
    }

    /// Columns `start..start + width` as a new matrix.
    pub fn col_block(&self, start: usize, width: usize) -> Self {
        assert!(start + width <= self.cols);
        let mut out = Self::zeros(self.rows, width);
        for i in 0..self.rows {
            out.data[i * width..(i + 1) * width]
                .copy_from_slice(&self.row(i)[start..start + width]);
        }
        out
    }

    /// Whether `|m_ij - m_ji| <= tol * max(1, max|m|)` for all entries.
    pub fn is_symmetric(&self, tol: T) -> bool {
        if !self.is_square() {
            return false;
        }
        let scale = T::one().max(self.max_abs());
        (0..self.rows).all(|i| {
            (0..i).all(|j| (self[(i, j)] - self[(j, i)]).abs() <= tol * scale)
        })
    }
}

impl<T> Index<(usize, usize)> for Mat<T> {
    type Output = T;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &T {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl<T> IndexMut<(usize, usize)> for Mat<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

impl<T: Real> Mul for &Mat<T> {
    type Output = Mat<T>;

    fn mul(self, rhs: &Mat<T>) -> Mat<T> {
        assert_eq!(self.cols, rhs.rows, "matmul dimension mismatch");
        let mut out = Mat::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let orow = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == T::zero() {
                    continue;
                }
                for (o, &b) in orow.iter_mut().zip(rhs.row(k)) {
                    *o = *o + a * b;
                }
            }
        }
        out
    }
}

impl<T: Real> Add for &Mat<T> {
    type Output = Mat<T>;
    fn add(self, rhs: &Mat<T>) -> Mat<T> {
        assert_eq!(self.shape(), rhs.shape(), "add dimension mismatch");
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(&a, &b)| a + b).collect(),
        }
    }
}

impl<T: Real> Sub for &Mat<T> {
    type Output = Mat<T>;
    fn sub(self, rhs: &Mat<T>) -> Mat<T> {
        assert_eq!(self.shape(), rhs.shape(), "sub dimension mismatch");
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(&a, &b)| a - b).collect(),
        }
    }
}

impl<T: Real> Neg for &Mat<T> {
    type Output = Mat<T>;
    fn neg(self) -> Mat<T> {
        self.scale(-T::one())
    }
}

impl<T: Real> AddAssign<&Mat<T>> for Mat<T> {
    fn add_assign(&mut self, rhs: &Mat<T>) {
        assert_eq!(self.shape(), rhs.shape(), "add dimension mismatch");
        for (a, &b) in self.data.iter_mut().zip(&rhs.data) {
            *a = *a + b;
        }
    }
}

impl<T: Real> SubAssign<&Mat<T>> for Mat<T> {
    fn sub_assign(&mut self, rhs: &Mat<T>) {
        assert_eq!(self.shape(), rhs.shape(), "sub dimension mismatch");
        for (a, &b) in self.data.iter_mut().zip(&rhs.data) {
            *a = *a - b;
        }
    }
}

// ---------------------------------------------------------------------------
// Vector helpers
// ---------------------------------------------------------------------------

pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

pub fn norm2<T: Real>(v: &[T]) -> T {
    dot(v, v).sqrt()
}

pub fn add_vec<T: Real>(a: &[T], b: &[T]) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| x + y).collect()
}

pub fn sub_vec<T: Real>(a: &[T], b: &[T]) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| x - y).collect()
}

/// `y += s * x`
pub fn axpy<T: Real>(y: &mut [T], s: T, x: &[T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + s * xi;
    }
}

// ---------------------------------------------------------------------------
// Decompositions
// ---------------------------------------------------------------------------

/// Thin singular value decomposition `M = U diag(s) V^T`.
///
/// With `p = min(rows, cols)`: `u` is `rows x p`, `v` is `cols x p`, and `s`
/// is sorted in decreasing order. Left vectors belonging to zero singular
/// values are left as zero columns.
#[derive(Clone, Debug)]
pub struct Svd<T> {
    pub u: Mat<T>,
    pub s: Vec<T>,
    pub v: Mat<T>,
}

fn check_input<T: Real>(m: &Mat<T>, op: &'static str) -> Result<()> {
    if m.is_empty() {
        return Err(Error::InvalidInput(format!("{op}: empty matrix")));
    }
    if !m.is_finite() {
        return Err(Error::InvalidInput(format!("{op}: non-finite entries")));
    }
    Ok(())
}

/// One-sided Jacobi SVD of a matrix with `rows >= cols`.
fn jacobi_tall<T: Real>(m: &Mat<T>) -> Svd<T> {
    let (rows, n) = m.shape();
    // Column-major working copies.
    let mut cols: Vec<Vec<T>> = (0..n).map(|j| (0..rows).map(|i| m[(i, j)]).collect()).collect();
    let mut vcols: Vec<Vec<T>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { T::one() } else { T::zero() }).collect())
        .collect();
    let eps = T::epsilon();

    for _ in 0..MAX_JACOBI_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let a = dot(&cols[p], &cols[p]);
                let b = dot(&cols[q], &cols[q]);
                let d = dot(&cols[p], &cols[q]);
                if d == T::zero() || d.abs() <= eps * (a * b).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (b - a) / (d + d);
                let t = zeta.signum() / (zeta.abs() + (T::one() + zeta * zeta).sqrt());
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = c * t;
                rotate_pair(&mut cols, p, q, c, s);
                rotate_pair(&mut vcols, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    let norms: Vec<T> = cols.iter().map(|c| norm2(c)).collect();
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap_or(std::cmp::Ordering::Equal));

    let mut u = Mat::zeros(rows, n);
    let mut v = Mat::zeros(n, n);
    let mut s = Vec::with_capacity(n);
    for (k, &j) in order.iter().enumerate() {
        let sigma = norms[j];
        s.push(sigma);
        if sigma > T::zero() {
            for i in 0..rows {
                u[(i, k)] = cols[j][i] / sigma;
            }
        }
        for i in 0..n {
            v[(i, k)] = vcols[j][i];
        }
    }
    Svd { u, s, v }
}

fn rotate_pair<T: Real>(cols: &mut [Vec<T>], p: usize, q: usize, c: T, s: T) {
    let (lo, hi) = cols.split_at_mut(q);
    for (x, y) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// Thin SVD of any nonempty finite matrix.
pub fn svd<T: Real>(m: &Mat<T>) -> Result<Svd<T>> {
    check_input(m, "svd")?;
    if m.rows() >= m.cols() {
        Ok(jacobi_tall(m))
    } else {
        let t = jacobi_tall(&m.transpose());
        Ok(Svd {
            u: t.v,
            s: t.s,
            v: t.u,
        })
    }
}

pub fn singular_values<T: Real>(m: &Mat<T>) -> Result<Vec<T>> {
    Ok(svd(m)?.s)
}

/// Largest singular value (operator 2-norm).
pub fn spectral_norm<T: Real>(m: &Mat<T>) -> Result<T> {
    Ok(singular_values(m)?[0])
}

/// Smallest of the `min(rows, cols)` singular values.
pub fn sigma_min<T: Real>(m: &Mat<T>) -> Result<T> {
    let s = singular_values(m)?;
    Ok(*s.last().expect("nonempty"))
}

fn full_row_rank_svd<T: Real>(a: &Mat<T>, op: &'static str) -> Result<Svd<T>> {
    let dec = svd(a)?;
    let threshold = RANK_THRESHOLD;
    if a.rows() > a.cols() {
        return Err(Error::RankDeficient {
            sigma: 0.0,
            threshold,
        });
    }
    let smin = dec.s.last().expect("nonempty").as_f64();
    if smin.is_nan() || smin < threshold {
        log::debug!("{op}: sigma_min {smin:e} below threshold");
        return Err(Error::RankDeficient {
            sigma: smin,
            threshold,
        });
    }
    Ok(dec)
}

/// Least-squares solution of `X A = B`, i.e. `X = B A^T (A A^T)^{-1}`.
///
/// `A` must have full row rank with `sigma_min(A) >= 1e-8`.
pub fn solve_least_squares<T: Real>(a: &Mat<T>, b: &Mat<T>) -> Result<Mat<T>> {
    if a.cols() != b.cols() {
        return Err(Error::shape(
            "solve_least_squares",
            format!("A is {:?}, B is {:?}", a.shape(), b.shape()),
        ));
    }
    check_input(b, "solve_least_squares")?;
    let dec = full_row_rank_svd(a, "solve_least_squares")?;
    // X = B V diag(1/s) U^T
    let mut bv = b * &dec.v;
    for i in 0..bv.rows() {
        for (j, &s) in dec.s.iter().enumerate() {
            bv[(i, j)] = bv[(i, j)] / s;
        }
    }
    Ok(&bv * &dec.u.transpose())
}

/// Minimum-norm solution of `A x = b` for full-row-rank `A`.
pub fn min_norm_solve<T: Real>(a: &Mat<T>, b: &[T]) -> Result<Vec<T>> {
    if a.rows() != b.len() {
        return Err(Error::shape(
            "min_norm_solve",
            format!("A has {} rows, b has {} entries", a.rows(), b.len()),
        ));
    }
    let dec = full_row_rank_svd(a, "min_norm_solve")?;
    let mut coeff = dec.u.tmatvec(b);
    for (c, &s) in coeff.iter_mut().zip(&dec.s) {
        *c = *c / s;
    }
    Ok(dec.v.matvec(&coeff))
}

/// Inverse of a square nonsingular matrix.
pub fn inverse<T: Real>(m: &Mat<T>) -> Result<Mat<T>> {
    if !m.is_square() {
        return Err(Error::shape("inverse", format!("{:?} is not square", m.shape())));
    }
    solve_least_squares(m, &Mat::identity(m.rows()))
}

/// Nearest matrix in Frobenius distance whose spectral norm is at most `radius`.
pub fn project_spectral_ball<T: Real>(m: &Mat<T>, radius: T) -> Mat<T> {
    let radius = radius.max(T::zero());
    let Ok(dec) = svd(m) else {
        return m.clone();
    };
    if dec.s[0] <= radius {
        return m.clone();
    }
    let mut out = m.clone();
    for (k, &s) in dec.s.iter().enumerate() {
        if s <= radius {
            break;
        }
        let uk: Vec<T> = (0..m.rows()).map(|i| dec.u[(i, k)]).collect();
        let vk: Vec<T> = (0..m.cols()).map(|i| dec.v[(i, k)]).collect();
        out.add_outer(radius - s, &uk, &vk);
    }
    out
}

/// `M^p` by binary exponentiation; `p = 0` gives the identity.
pub fn mat_power<T: Real>(m: &Mat<T>, p: u32) -> Result<Mat<T>> {
    if !m.is_square() {
        return Err(Error::shape("mat_power", format!("{:?} is not square", m.shape())));
    }
    let mut result = Mat::identity(m.rows());
    let mut base = m.clone();
    let mut e = p;
    while e > 0 {
        if e & 1 == 1 {
            result = &result * &base;
        }
        e >>= 1;
        if e > 0 {
            base = &base * &base;
        }
    }
    Ok(result)
}

/// Eigenvalues of a symmetric matrix (cyclic Jacobi), ascending.
pub fn symmetric_eigenvalues<T: Real>(m: &Mat<T>) -> Result<Vec<T>> {
    check_input(m, "symmetric_eigenvalues")?;
    if !m.is_square() {
        return Err(Error::shape("symmetric_eigenvalues", "not square"));
    }
    let n = m.rows();
    let mut a = m.clone();
    for _ in 0..MAX_JACOBI_SWEEPS {
        let off: T = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[(i, j)] * a[(i, j)])
            .sum();
        if off <= T::epsilon() * T::epsilon() * a.frobenius_norm().powi(2) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq == T::zero() {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (apq + apq);
                let t = theta.signum() / (theta.abs() + (T::one() + theta * theta).sqrt());
                let t = if theta == T::zero() { T::one() } else { t };
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[(k, p)], a[(k, q)]);
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[(p, k)], a[(q, k)]);
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<T> = (0..n).map(|i| a[(i, i)]).collect();
    ev.sort_by(|x, y| x.partial_cmp(y).unwrap_or(std::cmp::Ordering::Equal));
    Ok(ev)
}

/// Largest eigenvalue modulus of a square matrix.
pub fn spectral_radius<T: Real>(m: &Mat<T>) -> Result<T> {
    check_input(m, "spectral_radius")?;
    if !m.is_square() {
        return Err(Error::shape("spectral_radius", "not square"));
    }
    let n = m.rows();
    let dm = nalgebra::DMatrix::<f64>::from_fn(n, n, |i, j| m[(i, j)].as_f64());
    let rho = dm
        .complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0_f64, f64::max);
    Ok(T::lit(rho))
}
