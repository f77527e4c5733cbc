//! Small dense linear algebra: a row-major [`Matrix`], Cholesky and LU solves,
//! a cyclic Jacobi eigensolver and the matrix exponential.

use serde::{Deserialize, Serialize};
use std::ops::{Index, IndexMut};

use crate::error::{Error, Result};

/// Dense row-major real matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch { expected: rows * cols, got: data.len() });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::DimensionMismatch { expected: c, got: row.len() });
            }
            data.extend_from_slice(row);
        }
        Ok(Matrix { rows: r, cols: c, data })
    }

    pub fn column(v: &[f64]) -> Self {
        Matrix { rows: v.len(), cols: 1, data: v.to_vec() }
    }

    pub fn diag(v: &[f64]) -> Self {
        let mut m = Matrix::zeros(v.len(), v.len());
        for (i, &x) in v.iter().enumerate() {
            m[(i, i)] = x;
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

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols;
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn trace(&self) -> f64 {
        self.diagonal().iter().sum()
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|x| x * s).collect() }
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip(other, |a, b| a - b)
    }

    fn zip(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::DimensionMismatch {
                expected: self.data.len(),
                got: other.data.len(),
            });
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Matrix { rows: self.rows, cols: self.cols, data })
    }

    /// Matrix product `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::DimensionMismatch { expected: self.cols, got: other.rows });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        if self.rows == 0 || other.cols == 0 || self.cols == 0 {
            return Ok(out);
        }
        // SAFETY: all three buffers are dense row-major with the dimensions passed.
        unsafe {
            matrixmultiply::dgemm(
                self.rows,
                self.cols,
                other.cols,
                1.0,
                self.data.as_ptr(),
                self.cols as isize,
                1,
                other.data.as_ptr(),
                other.cols as isize,
                1,
                0.0,
                out.data.as_mut_ptr(),
                out.cols as isize,
                1,
            );
        }
        Ok(out)
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(Error::DimensionMismatch { expected: self.cols, got: v.len() });
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), v)).collect())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
    }

    fn norm_1(&self) -> f64 {
        (0..self.cols)
            .map(|j| (0..self.rows).map(|i| self[(i, j)].abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// `(A + Aᵀ)/2`.
    pub fn symmetric_part(&self) -> Matrix {
        Matrix::from_fn(self.rows, self.cols, |i, j| 0.5 * (self[(i, j)] + self[(j, i)]))
    }

    /// True when `|a_ij − a_ji| ≤ rel_tol · max|a|` for all entries.
    pub fn is_symmetric(&self, rel_tol: f64) -> bool {
        if !self.is_square() {
            return false;
        }
        let scale = self.max_abs().max(f64::MIN_POSITIVE);
        (0..self.rows).all(|i| {
            (0..i).all(|j| (self[(i, j)] - self[(j, i)]).abs() <= rel_tol * scale)
        })
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Sequential dot product.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_square(a: &Matrix) -> Result<usize> {
    if !a.is_square() {
        return Err(Error::DimensionMismatch { expected: a.rows(), got: a.cols() });
    }
    Ok(a.rows())
}

/// Lower Cholesky factor of `A + jitter·I`, or `None` if a pivot is not positive.
fn cholesky(a: &Matrix, jitter: f64) -> Option<Matrix> {
    let n = a.rows();
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)] + jitter - dot(&l.row(j)[..j], &l.row(j)[..j]);
        if !(d > 0.0) || !d.is_finite() {
            return None;
        }
        d = d.sqrt();
        l[(j, j)] = d;
        for i in j + 1..n {
            let s = a[(i, j)] - dot(&l.row(i)[..j], &l.row(j)[..j]);
            l[(i, j)] = s / d;
        }
    }
    Some(l)
}

/// Cholesky factorization with jitter escalation, returning the factor and the jitter used.
pub fn cholesky_jittered(a: &Matrix) -> Result<(Matrix, f64)> {
    let n = check_square(a)?;
    if !a.is_symmetric(1e-10) {
        return Err(Error::PreconditionViolated("matrix is not symmetric".into()));
    }
    if let Some(l) = cholesky(a, 0.0) {
        return Ok((l, 0.0));
    }
    let base = (a.trace() / n.max(1) as f64).abs().max(f64::MIN_POSITIVE);
    let mut jitter = 1e-12 * base;
    let mut last = jitter;
    while jitter <= 1e-6 * base * (1.0 + 1e-9) {
        if let Some(l) = cholesky(a, jitter) {
            return Ok((l, jitter));
        }
        last = jitter;
        jitter *= 10.0;
    }
    Err(Error::NotPositiveDefinite { jitter: last })
}

/// Solves `A X = B` for symmetric positive definite `A`.
pub fn solve_spd(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    let n = check_square(a)?;
    if b.rows() != n {
        return Err(Error::DimensionMismatch { expected: n, got: b.rows() });
    }
    let (l, _) = cholesky_jittered(a)?;
    let mut x = b.clone();
    for c in 0..b.cols() {
        for i in 0..n {
            let mut s = x[(i, c)];
            for k in 0..i {
                s -= l[(i, k)] * x[(k, c)];
            }
            x[(i, c)] = s / l[(i, i)];
        }
        for i in (0..n).rev() {
            let mut s = x[(i, c)];
            for k in i + 1..n {
                s -= l[(k, i)] * x[(k, c)];
            }
            x[(i, c)] = s / l[(i, i)];
        }
    }
    Ok(x)
}

/// Solves `A X = B` by Gaussian elimination with partial pivoting.
pub fn solve_lu(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    let n = check_square(a)?;
    if b.rows() != n {
        return Err(Error::DimensionMismatch { expected: n, got: b.rows() });
    }
    let mut m = a.clone();
    let mut x = b.clone();
    let scale = a.max_abs();
    if scale == 0.0 && n > 0 {
        return Err(Error::SingularGram);
    }
    for k in 0..n {
        let p = (k..n)
            .max_by(|&i, &j| m[(i, k)].abs().total_cmp(&m[(j, k)].abs()))
            .unwrap_or(k);
        if m[(p, k)].abs() <= f64::EPSILON * scale * n as f64 {
            return Err(Error::SingularGram);
        }
        if p != k {
            for j in 0..n {
                m.data.swap(k * n + j, p * n + j);
            }
            for j in 0..x.cols() {
                let c = x.cols();
                x.data.swap(k * c + j, p * c + j);
            }
        }
        for i in k + 1..n {
            let f = m[(i, k)] / m[(k, k)];
            if f == 0.0 {
                continue;
            }
            for j in k..n {
                m[(i, j)] -= f * m[(k, j)];
            }
            for j in 0..x.cols() {
                x[(i, j)] -= f * x[(k, j)];
            }
        }
    }
    for c in 0..x.cols() {
        for i in (0..n).rev() {
            let mut s = x[(i, c)];
            for k in i + 1..n {
                s -= m[(i, k)] * x[(k, c)];
            }
            x[(i, c)] = s / m[(i, i)];
        }
    }
    if !x.all_finite() {
        return Err(Error::NonFinite("solve_lu"));
    }
    Ok(x)
}

/// Eigendecomposition of a symmetric matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SymEig {
    /// Eigenvalues in ascending order.
    pub eigenvalues: Vec<f64>,
    /// Orthogonal matrix whose columns are the matching eigenvectors.
    pub eigenvectors: Matrix,
}

impl SymEig {
    /// Rebuilds `Q f(Λ) Qᵀ`.
    pub fn apply_fn(&self, f: impl Fn(f64) -> f64) -> Matrix {
        let q = &self.eigenvectors;
        let n = q.rows();
        let fl: Vec<f64> = self.eigenvalues.iter().map(|&l| f(l)).collect();
        Matrix::from_fn(n, n, |i, j| (0..n).map(|k| q[(i, k)] * fl[k] * q[(j, k)]).sum())
    }
}

const JACOBI_MAX_SWEEPS: usize = 100;

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
pub fn eig_sym(a: &Matrix) -> Result<SymEig> {
    let n = check_square(a)?;
    if !a.is_symmetric(1e-8) {
        return Err(Error::PreconditionViolated("matrix is not symmetric".into()));
    }
    if !a.all_finite() {
        return Err(Error::NonFinite("eig_sym input"));
    }
    let mut m = a.symmetric_part();
    let mut v = Matrix::identity(n);
    let norm = m.frobenius_norm();
    let mut converged = n <= 1 || norm == 0.0;
    let mut sweep = 0;
    while !converged && sweep < JACOBI_MAX_SWEEPS {
        sweep += 1;
        let off: f64 = (0..n)
            .flat_map(|i| (0..i).map(move |j| (i, j)))
            .map(|(i, j)| m[(i, j)] * m[(i, j)])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * norm {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let app = m[(p, p)];
                let aqq = m[(q, q)];
                if sweep > 4 && apq.abs() < 1e-18 * (app.abs() + aqq.abs()) {
                    m[(p, q)] = 0.0;
                    m[(q, p)] = 0.0;
                    continue;
                }
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                m[(p, q)] = 0.0;
                m[(q, p)] = 0.0;
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    if !converged {
        return Err(Error::NoConvergence { what: "Jacobi eigensolver", iterations: sweep });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(i, i)].total_cmp(&m[(j, j)]));
    let eigenvalues = order.iter().map(|&i| m[(i, i)]).collect();
    let eigenvectors = Matrix::from_fn(n, n, |i, j| v[(i, order[j])]);
    Ok(SymEig { eigenvalues, eigenvectors })
}

/// `exp(t·A)` by scaling and squaring of a truncated Taylor series.
pub fn matrix_exp(a: &Matrix, t: f64) -> Result<Matrix> {
    let n = check_square(a)?;
    let at = a.scale(t);
    if !at.all_finite() {
        return Err(Error::NonFinite("matrix_exp input"));
    }
    let norm = at.norm_1();
    let s = if norm > 0.5 { (norm / 0.5).log2().ceil() as i32 } else { 0 };
    let b = at.scale(0.5_f64.powi(s));
    let mut sum = Matrix::identity(n);
    let mut term = Matrix::identity(n);
    for k in 1..=200 {
        term = term.matmul(&b)?.scale(1.0 / k as f64);
        sum = sum.add(&term)?;
        if term.max_abs() < 1e-16 * sum.max_abs().max(1.0) {
            break;
        }
    }
    for _ in 0..s {
        sum = sum.matmul(&sum)?;
    }
    if !sum.all_finite() {
        return Err(Error::NonFinite("matrix_exp"));
    }
    Ok(sum)
}

/// `exp(t·A)` for symmetric `A` through its eigendecomposition.
pub fn matrix_exp_sym(a: &Matrix, t: f64) -> Result<Matrix> {
    let e = eig_sym(a)?;
    let out = e.apply_fn(|l| (t * l).exp());
    if !out.all_finite() {
        return Err(Error::NonFinite("matrix_exp_sym"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> Matrix {
        let g = random_matrix(rng, n, n);
        let mut a = g.matmul(&g.transpose()).unwrap();
        for i in 0..n {
            a[(i, i)] += 0.1;
        }
        a
    }

    #[test]
    fn solve_identity_and_diagonal() {
        let b = Matrix::column(&[1.0, -2.0, 3.0]);
        assert_eq!(solve_spd(&Matrix::identity(3), &b).unwrap(), b);
        let x = solve_spd(&Matrix::diag(&[2.0, 4.0]), &Matrix::column(&[2.0, 4.0])).unwrap();
        assert!((x[(0, 0)] - 1.0).abs() < 1e-15 && (x[(1, 0)] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn solve_spd_residual_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_spd(&mut rng, 15);
        let b = random_matrix(&mut rng, 15, 3);
        let x = solve_spd(&a, &b).unwrap();
        let r = a.matmul(&x).unwrap().sub(&b).unwrap();
        assert!(r.frobenius_norm() <= 1e-8 * b.frobenius_norm());
    }

    #[test]
    fn solve_spd_uses_jitter_for_semidefinite() {
        let a = Matrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let (_, jitter) = cholesky_jittered(&a).unwrap();
        assert!(jitter > 0.0);
        let neg = Matrix::diag(&[1.0, -1.0]);
        assert!(matches!(solve_spd(&neg, &Matrix::column(&[1.0, 1.0])), Err(Error::NotPositiveDefinite { .. })));
    }

    #[test]
    fn lu_matches_spd_and_handles_asymmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_spd(&mut rng, 10);
        let b = random_matrix(&mut rng, 10, 2);
        let x1 = solve_spd(&a, &b).unwrap();
        let x2 = solve_lu(&a, &b).unwrap();
        assert!(x1.sub(&x2).unwrap().max_abs() < 1e-9);
        let c = random_matrix(&mut rng, 12, 12);
        let b = random_matrix(&mut rng, 12, 1);
        let x = solve_lu(&c, &b).unwrap();
        assert!(c.matmul(&x).unwrap().sub(&b).unwrap().frobenius_norm() < 1e-9);
        assert_eq!(solve_lu(&Matrix::zeros(2, 2), &b.clone()), Err(Error::DimensionMismatch { expected: 2, got: 12 }));
        let sing = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]).unwrap();
        assert_eq!(solve_lu(&sing, &Matrix::column(&[1.0, 1.0])), Err(Error::SingularGram));
    }

    #[test]
    fn eig_known_cases() {
        let e = eig_sym(&Matrix::diag(&[3.0, 1.0, 2.0])).unwrap();
        assert_eq!(e.eigenvalues, vec![1.0, 2.0, 3.0]);
        assert_eq!(e.eigenvectors[(1, 0)].abs(), 1.0);
        let e = eig_sym(&Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap()).unwrap();
        assert!((e.eigenvalues[0] + 1.0).abs() < 1e-15 && (e.eigenvalues[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn eig_reconstructs_random_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = random_matrix(&mut rng, 10, 10);
        let a = g.add(&g.transpose()).unwrap();
        let e = eig_sym(&a).unwrap();
        let rec = e.apply_fn(|l| l);
        assert!(rec.sub(&a).unwrap().frobenius_norm() <= 1e-8 * a.frobenius_norm());
        let qtq = e.eigenvectors.transpose().matmul(&e.eigenvectors).unwrap();
        assert!(qtq.sub(&Matrix::identity(10)).unwrap().frobenius_norm() <= 1e-8);
        assert!(e.eigenvalues.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn matrix_exp_trivial_cases() {
        assert_eq!(matrix_exp(&Matrix::zeros(3, 3), 1.0).unwrap(), Matrix::identity(3));
        let e = matrix_exp(&Matrix::diag(&[1.0, -1.0]), 1.0).unwrap();
        assert!((e[(0, 0)] - std::f64::consts::E).abs() < 1e-14);
        assert!((e[(1, 1)] - (-1.0_f64).exp()).abs() < 1e-15);
        assert_eq!(e[(0, 1)], 0.0);
    }

    fn taylor_exp(a: &Matrix, terms: usize) -> Matrix {
        let n = a.rows();
        let mut sum = Matrix::identity(n);
        let mut term = Matrix::identity(n);
        for k in 1..=terms {
            term = term.matmul(a).unwrap().scale(1.0 / k as f64);
            sum = sum.add(&term).unwrap();
        }
        sum
    }

    #[test]
    fn matrix_exp_matches_repeated_squaring_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_matrix(&mut rng, 8, 8).scale(2.0);
        let small = taylor_exp(&a.scale(1.0 / 1024.0), 30);
        let mut oracle = small;
        for _ in 0..10 {
            oracle = oracle.matmul(&oracle).unwrap();
        }
        let e = matrix_exp(&a, 1.0).unwrap();
        assert!(e.sub(&oracle).unwrap().frobenius_norm() <= 1e-8 * oracle.frobenius_norm());
    }

    #[test]
    fn matrix_exp_sym_agrees_with_series() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let a = random_spd(&mut rng, 6);
        let e1 = matrix_exp(&a, -0.7).unwrap();
        let e2 = matrix_exp_sym(&a, -0.7).unwrap();
        assert!(e1.sub(&e2).unwrap().frobenius_norm() <= 1e-10 * e1.frobenius_norm());
    }
}
