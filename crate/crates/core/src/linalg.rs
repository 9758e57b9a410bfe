//! Dense column-major matrices and the handful of LAPACK drivers the solvers
//! need (LU with condition estimate, QZ, standard non-symmetric eigen).

use std::ops::{Index, IndexMut};

use num_complex::Complex64;

use crate::error::{Error, Result};

pub type C64 = Complex64;

pub const CZERO: C64 = C64::new(0.0, 0.0);
pub const CONE: C64 = C64::new(1.0, 0.0);

/// Scalar types with LAPACK LU support.
pub trait Scalar: Copy + Default + Send + Sync + std::fmt::Debug + 'static {
    fn zero() -> Self {
        Self::default()
    }
    fn modulus(self) -> f64;
    #[doc(hidden)]
    fn getrf(n: i32, a: &mut [Self], ipiv: &mut [i32]) -> i32;
    #[doc(hidden)]
    fn getrs(trans: u8, n: i32, nrhs: i32, a: &[Self], ipiv: &[i32], b: &mut [Self]) -> i32;
    #[doc(hidden)]
    fn one_norm(n: usize, a: &[Self]) -> f64 {
        (0..n)
            .map(|j| a[j * n..(j + 1) * n].iter().map(|v| v.modulus()).sum::<f64>())
            .fold(0.0, f64::max)
    }
    #[doc(hidden)]
    fn gecon(n: i32, lu: &[Self], anorm: f64) -> f64;
}

impl Scalar for f64 {
    fn modulus(self) -> f64 {
        self.abs()
    }
    fn getrf(n: i32, a: &mut [f64], ipiv: &mut [i32]) -> i32 {
        let mut info = 0;
        unsafe { lapack::dgetrf(n, n, a, n, ipiv, &mut info) };
        info
    }
    fn getrs(trans: u8, n: i32, nrhs: i32, a: &[f64], ipiv: &[i32], b: &mut [f64]) -> i32 {
        let mut info = 0;
        let trans = if trans == b'C' { b'T' } else { trans };
        unsafe { lapack::dgetrs(trans, n, nrhs, a, n, ipiv, b, n, &mut info) };
        info
    }
    fn gecon(n: i32, lu: &[f64], anorm: f64) -> f64 {
        let mut rcond = 0.0;
        let mut work = vec![0.0; 4 * n as usize];
        let mut iwork = vec![0; n as usize];
        let mut info = 0;
        unsafe { lapack::dgecon(b'1', n, lu, n, anorm, &mut rcond, &mut work, &mut iwork, &mut info) };
        rcond
    }
}

impl Scalar for C64 {
    fn modulus(self) -> f64 {
        self.norm()
    }
    fn getrf(n: i32, a: &mut [C64], ipiv: &mut [i32]) -> i32 {
        let mut info = 0;
        unsafe { lapack::zgetrf(n, n, a, n, ipiv, &mut info) };
        info
    }
    fn getrs(trans: u8, n: i32, nrhs: i32, a: &[C64], ipiv: &[i32], b: &mut [C64]) -> i32 {
        let mut info = 0;
        unsafe { lapack::zgetrs(trans, n, nrhs, a, n, ipiv, b, n, &mut info) };
        info
    }
    fn gecon(n: i32, lu: &[C64], anorm: f64) -> f64 {
        let mut rcond = 0.0;
        let mut work = vec![CZERO; 2 * n as usize];
        let mut rwork = vec![0.0; 2 * n as usize];
        let mut info = 0;
        unsafe { lapack::zgecon(b'1', n, lu, n, anorm, &mut rcond, &mut work, &mut rwork, &mut info) };
        rcond
    }
}

/// Column-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

pub type RMatrix = Matrix<f64>;
pub type CMatrix = Matrix<C64>;

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for j in 0..cols {
            for i in 0..rows {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn col(&self, j: usize) -> &[T] {
        &self.data[j * self.rows..(j + 1) * self.rows]
    }

    pub fn col_mut(&mut self, j: usize) -> &mut [T] {
        &mut self.data[j * self.rows..(j + 1) * self.rows]
    }

    pub fn lu(&self) -> Result<Lu<T>> {
        Lu::factor(self.clone())
    }
}

impl<T> Index<(usize, usize)> for Matrix<T> {
    type Output = T;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &T {
        &self.data[j * self.rows + i]
    }
}

impl<T> IndexMut<(usize, usize)> for Matrix<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        &mut self.data[j * self.rows + i]
    }
}

impl RMatrix {
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols);
        let mut y = vec![0.0; self.rows];
        for (j, &xj) in x.iter().enumerate() {
            if xj == 0.0 {
                continue;
            }
            for (yi, a) in y.iter_mut().zip(self.col(j)) {
                *yi += a * xj;
            }
        }
        y
    }
}

impl CMatrix {
    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { CONE } else { CZERO })
    }

    pub fn mul_vec(&self, x: &[C64]) -> Vec<C64> {
        assert_eq!(x.len(), self.cols);
        let mut y = vec![CZERO; self.rows];
        for (j, &xj) in x.iter().enumerate() {
            if xj == CZERO {
                continue;
            }
            for (yi, a) in y.iter_mut().zip(self.col(j)) {
                *yi += a * xj;
            }
        }
        y
    }

    /// `self^H x`
    pub fn adjoint_mul_vec(&self, x: &[C64]) -> Vec<C64> {
        assert_eq!(x.len(), self.rows);
        (0..self.cols)
            .map(|j| self.col(j).iter().zip(x).map(|(a, b)| a.conj() * b).sum())
            .collect()
    }

    /// `self - shift * other`
    pub fn shifted(&self, shift: C64, other: &CMatrix) -> CMatrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - shift * b).collect();
        Matrix { rows: self.rows, cols: self.cols, data }
    }
}

/// LU factorization with partial pivoting.
#[derive(Debug, Clone)]
pub struct Lu<T> {
    n: usize,
    lu: Vec<T>,
    ipiv: Vec<i32>,
    anorm: f64,
}

impl<T: Scalar> Lu<T> {
    pub fn factor(a: Matrix<T>) -> Result<Self> {
        if a.rows != a.cols {
            return Err(Error::Dimension(format!("LU of non-square {}x{} matrix", a.rows, a.cols)));
        }
        let n = a.rows;
        let anorm = T::one_norm(n, &a.data);
        let mut lu = a.data;
        let mut ipiv = vec![0; n];
        let info = T::getrf(n as i32, &mut lu, &mut ipiv);
        if info < 0 {
            return Err(Error::Factorization(format!("getrf argument {} invalid", -info)));
        }
        if info > 0 {
            return Err(Error::Factorization(format!("exactly singular pivot at column {info}")));
        }
        Ok(Lu { n, lu, ipiv, anorm })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn solve_in_place(&self, b: &mut [T]) {
        assert_eq!(b.len(), self.n);
        T::getrs(b'N', self.n as i32, 1, &self.lu, &self.ipiv, b);
    }

    pub fn solve(&self, b: &[T]) -> Vec<T> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        x
    }

    /// Solves `A^H x = b` (`A^T x = b` for real matrices).
    pub fn solve_adjoint(&self, b: &[T]) -> Vec<T> {
        assert_eq!(b.len(), self.n);
        let mut x = b.to_vec();
        T::getrs(b'C', self.n as i32, 1, &self.lu, &self.ipiv, &mut x);
        x
    }

    /// Reciprocal 1-norm condition estimate.
    pub fn rcond(&self) -> f64 {
        if self.n == 0 {
            return 1.0;
        }
        T::gecon(self.n as i32, &self.lu, self.anorm)
    }
}

/// Output of the QZ driver: eigenvalues as `alpha / beta` pairs.
pub struct QzResult {
    pub alpha: Vec<C64>,
    pub beta: Vec<C64>,
    pub left: Option<CMatrix>,
    pub right: Option<CMatrix>,
}

/// Generalized eigenproblem `A x = lambda B x` by the QZ algorithm (zggev).
pub fn qz(a: &CMatrix, b: &CMatrix, want_left: bool, want_right: bool) -> Result<QzResult> {
    let n = a.rows;
    if a.cols != n || b.rows != n || b.cols != n {
        return Err(Error::Dimension("qz needs square matrices of equal size".into()));
    }
    let ni = n as i32;
    let mut aa = a.data.clone();
    let mut bb = b.data.clone();
    let mut alpha = vec![CZERO; n];
    let mut beta = vec![CZERO; n];
    let ldvl = if want_left { n.max(1) } else { 1 };
    let ldvr = if want_right { n.max(1) } else { 1 };
    let mut vl = vec![CZERO; ldvl * if want_left { n } else { 1 }];
    let mut vr = vec![CZERO; ldvr * if want_right { n } else { 1 }];
    let mut rwork = vec![0.0; 8 * n.max(1)];
    let mut info = 0;
    let jobvl = if want_left { b'V' } else { b'N' };
    let jobvr = if want_right { b'V' } else { b'N' };
    let mut query = [CZERO];
    unsafe {
        lapack::zggev(
            jobvl, jobvr, ni, &mut aa, ni, &mut bb, ni, &mut alpha, &mut beta, &mut vl,
            ldvl as i32, &mut vr, ldvr as i32, &mut query, -1, &mut rwork, &mut info,
        )
    };
    let lwork = (query[0].re as usize).max(2 * n.max(1));
    let mut work = vec![CZERO; lwork];
    unsafe {
        lapack::zggev(
            jobvl, jobvr, ni, &mut aa, ni, &mut bb, ni, &mut alpha, &mut beta, &mut vl,
            ldvl as i32, &mut vr, ldvr as i32, &mut work, lwork as i32, &mut rwork, &mut info,
        )
    };
    if info != 0 {
        return Err(Error::Eigen(format!("zggev failed with info {info}")));
    }
    Ok(QzResult {
        alpha,
        beta,
        left: want_left.then_some(Matrix { rows: n, cols: n, data: vl }),
        right: want_right.then_some(Matrix { rows: n, cols: n, data: vr }),
    })
}

/// Standard non-symmetric eigenproblem (zgeev); returns values and right vectors.
pub fn eig(a: &CMatrix) -> Result<(Vec<C64>, CMatrix)> {
    let n = a.rows;
    let ni = n as i32;
    let mut aa = a.data.clone();
    let mut w = vec![CZERO; n];
    let mut vl = vec![CZERO; 1];
    let mut vr = vec![CZERO; n * n];
    let mut rwork = vec![0.0; 2 * n.max(1)];
    let mut info = 0;
    let lwork = 4 * n.max(1);
    let mut work = vec![CZERO; lwork];
    unsafe {
        lapack::zgeev(
            b'N', b'V', ni, &mut aa, ni, &mut w, &mut vl, 1, &mut vr, ni, &mut work,
            lwork as i32, &mut rwork, &mut info,
        )
    };
    if info != 0 {
        return Err(Error::Eigen(format!("zgeev failed with info {info}")));
    }
    Ok((w, Matrix { rows: n, cols: n, data: vr }))
}

pub fn dot_conj(a: &[C64], b: &[C64]) -> C64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

pub fn norm2(a: &[C64]) -> f64 {
    a.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt()
}

pub fn norm_inf(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lu_solves_small_system() {
        let a = RMatrix::from_fn(3, 3, |i, j| if i == j { 4.0 } else { 1.0 / (1.0 + i as f64 + j as f64) });
        let x = vec![1.0, -2.0, 0.5];
        let b = a.mul_vec(&x);
        let sol = a.lu().unwrap().solve(&b);
        for (p, q) in sol.iter().zip(&x) {
            assert!((p - q).abs() < 1e-14);
        }
        assert!(a.lu().unwrap().rcond() > 0.1);
    }

    #[test]
    fn adjoint_solve_matches_conjugate_transpose() {
        let a = CMatrix::from_fn(4, 4, |i, j| {
            C64::new((i * 3 + j) as f64 * 0.1 + if i == j { 3.0 } else { 0.0 }, (i as f64 - j as f64) * 0.2)
        });
        let b: Vec<C64> = (0..4).map(|i| C64::new(i as f64, 1.0)).collect();
        let x = a.lu().unwrap().solve_adjoint(&b);
        let back = a.adjoint_mul_vec(&x);
        for (p, q) in back.iter().zip(&b) {
            assert!((p - q).norm() < 1e-12);
        }
    }

    #[test]
    fn singular_matrix_is_reported() {
        let a = RMatrix::zeros(2, 2);
        assert!(matches!(a.lu(), Err(Error::Factorization(_))));
    }

    #[test]
    fn qz_flags_infinite_eigenvalue() {
        let a = CMatrix::from_fn(3, 3, |i, j| if i == j { C64::new(1.0 + i as f64, 0.0) } else { CZERO });
        let b = CMatrix::from_fn(3, 3, |i, j| if i == j && i < 2 { CONE } else { CZERO });
        let res = qz(&a, &b, false, true).unwrap();
        let finite: Vec<f64> = res
            .alpha
            .iter()
            .zip(&res.beta)
            .filter(|(_, b)| b.norm() > 1e-12)
            .map(|(a, b)| (a / b).re)
            .collect();
        assert_eq!(finite.len(), 2);
    }
}
