//! Chebyshev–Fourier primitives.
//!
//! Fields are expanded as `sum_n sum_m v_nm Phi_n(x1) T_m(x2)` with the
//! orthonormal Fourier modes `Phi_n = sqrt(k/2pi) exp(i n k x1)` and
//! Chebyshev polynomials `T_m`. Only `n >= 0` is stored for real states; the
//! negative modes follow from `v_{-n,m} = conj(v_nm)`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{RMatrix, C64};

/// Discretization descriptor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModeGrid {
    /// Streamwise wavenumber.
    pub k: f64,
    /// Highest Fourier mode; modes `0..=n1` are stored.
    pub n1: usize,
    /// Chebyshev degree; modes `0..=n2`.
    pub n2: usize,
    /// 3 (u1, u2, p) or 6 (u1, u2, p, T11, T12, T22).
    pub nfields: usize,
}

impl ModeGrid {
    pub fn new(k: f64, n1: usize, n2: usize, nfields: usize) -> Result<Self> {
        let grid = ModeGrid { k, n1, n2, nfields };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.k.is_finite() && self.k > 0.0) {
            return Err(Error::InvalidParameter(format!("k must be > 0, got {}", self.k)));
        }
        if self.n1 < 1 {
            return Err(Error::DegenerateGrid("n1 must be >= 1".into()));
        }
        if self.n2 < 4 {
            return Err(Error::DegenerateGrid(format!("n2 must be >= 4, got {}", self.n2)));
        }
        if self.nfields != 3 && self.nfields != 6 {
            return Err(Error::InvalidParameter(format!("nfields must be 3 or 6, got {}", self.nfields)));
        }
        Ok(())
    }

    /// Same grid restricted to the mean (x1-independent) mode.
    pub(crate) fn mean_only(&self) -> Self {
        ModeGrid { n1: 0, ..*self }
    }

    /// Chebyshev coefficients per field and mode.
    pub fn nc(&self) -> usize {
        self.n2 + 1
    }

    /// Unknowns per Fourier mode.
    pub fn block(&self) -> usize {
        self.nfields * self.nc()
    }

    /// Length of the stored (n >= 0) coefficient vector.
    pub fn half_len(&self) -> usize {
        self.block() * (self.n1 + 1)
    }

    /// Total complex unknowns of a stored state including f and c.
    pub fn unknowns(&self) -> usize {
        self.half_len() + 2
    }

    /// Number of Fourier modes in the two-sided representation.
    pub fn modes(&self) -> usize {
        2 * self.n1 + 1
    }

    /// Dimension of the two-sided (n = -n1..=n1) representation including f and c.
    pub fn full_dim(&self) -> usize {
        self.block() * self.modes() + 2
    }

    pub fn aux_f(&self) -> usize {
        self.full_dim() - 2
    }

    pub fn aux_c(&self) -> usize {
        self.full_dim() - 1
    }

    /// Start of the mode-`n` block in the two-sided layout.
    #[inline]
    pub fn full_block_start(&self, n: i64) -> usize {
        debug_assert!(n.unsigned_abs() as usize <= self.n1);
        (n + self.n1 as i64) as usize * self.block()
    }

    #[inline]
    pub fn full_index(&self, n: i64, field: usize, m: usize) -> usize {
        self.full_block_start(n) + field * self.nc() + m
    }

    #[inline]
    pub fn half_index(&self, n: usize, field: usize, m: usize) -> usize {
        (n * self.nfields + field) * self.nc() + m
    }

    /// Fourier mode of a two-sided index (None for f and c).
    pub fn mode_of(&self, idx: usize) -> Option<i64> {
        (idx < self.aux_f()).then(|| (idx / self.block()) as i64 - self.n1 as i64)
    }

    /// `sqrt(k / 2pi)`, the value of every `|Phi_n|`.
    pub fn fourier_norm(&self) -> f64 {
        (self.k / (2.0 * PI)).sqrt()
    }

    pub fn period(&self) -> f64 {
        2.0 * PI / self.k
    }

    pub fn is_oldroyd_b(&self) -> bool {
        self.nfields == 6
    }
}

/// Chebyshev abscissae `cos(s pi / n2)`, `s = 0..=n2`.
pub fn gauss_lobatto_points(n2: usize) -> Result<Vec<f64>> {
    if n2 == 0 {
        return Err(Error::DegenerateGrid("Gauss-Lobatto grid needs n2 >= 1".into()));
    }
    Ok((0..=n2)
        .map(|s| {
            // exact symmetry about the centre
            if 2 * s == n2 {
                0.0
            } else {
                (s as f64 * PI / n2 as f64).cos()
            }
        })
        .collect())
}

/// Values and exact derivatives of `T_0..T_n2` at a set of points.
#[derive(Debug, Clone)]
pub struct ChebMatrices {
    pub points: Vec<f64>,
    /// `eval[(s, m)] = T_m(x_s)`
    pub eval: RMatrix,
    pub d1: RMatrix,
    pub d2: RMatrix,
    /// Clenshaw–Curtis weights (only for Gauss–Lobatto point sets).
    pub weights: Vec<f64>,
    /// `integrals[m] = int_{-1}^{1} T_m`
    pub integrals: Vec<f64>,
}

/// Tables on the Gauss–Lobatto points of degree `n2`.
pub fn cheb_matrices(n2: usize) -> Result<ChebMatrices> {
    let points = gauss_lobatto_points(n2)?;
    let mut cheb = ChebMatrices::at_points(&points, n2);
    cheb.weights = clenshaw_curtis_weights(n2);
    Ok(cheb)
}

impl ChebMatrices {
    /// Tables of `T_m`, `T_m'`, `T_m''` (`m = 0..=degree`) at arbitrary points,
    /// built from the three-term recurrences.
    pub fn at_points(points: &[f64], degree: usize) -> Self {
        let rows = points.len();
        let cols = degree + 1;
        let mut eval = RMatrix::zeros(rows, cols);
        let mut d1 = RMatrix::zeros(rows, cols);
        let mut d2 = RMatrix::zeros(rows, cols);
        for (s, &x) in points.iter().enumerate() {
            let (t, dt, ddt) = cheb_values(x, degree);
            for m in 0..cols {
                eval[(s, m)] = t[m];
                d1[(s, m)] = dt[m];
                d2[(s, m)] = ddt[m];
            }
        }
        ChebMatrices {
            points: points.to_vec(),
            eval,
            d1,
            d2,
            weights: Vec::new(),
            integrals: cheb_integrals(degree),
        }
    }

    pub fn degree(&self) -> usize {
        self.eval.cols() - 1
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Table for derivative order 0, 1 or 2.
    pub fn table(&self, order: usize) -> &RMatrix {
        match order {
            0 => &self.eval,
            1 => &self.d1,
            2 => &self.d2,
            _ => panic!("derivative order {order} not tabulated"),
        }
    }

    /// Applies a table to complex coefficients, writing point values.
    pub fn apply(&self, order: usize, coeffs: &[C64], out: &mut [C64]) {
        let table = self.table(order);
        debug_assert_eq!(coeffs.len(), table.cols());
        debug_assert_eq!(out.len(), table.rows());
        out.iter_mut().for_each(|o| *o = C64::default());
        for (m, &c) in coeffs.iter().enumerate() {
            if c == C64::default() {
                continue;
            }
            for (o, &t) in out.iter_mut().zip(table.col(m)) {
                *o += c * t;
            }
        }
    }

    /// Quadrature of point values with the Clenshaw–Curtis weights.
    pub fn quadrature(&self, values: &[f64]) -> f64 {
        assert_eq!(values.len(), self.weights.len(), "quadrature needs Gauss-Lobatto weights");
        values.iter().zip(&self.weights).map(|(v, w)| v * w).sum()
    }
}

/// `T_m(x)`, `T_m'(x)`, `T_m''(x)` for `m = 0..=degree`.
pub fn cheb_values(x: f64, degree: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = degree + 1;
    let mut t = vec![0.0; n];
    let mut dt = vec![0.0; n];
    let mut ddt = vec![0.0; n];
    t[0] = 1.0;
    if n > 1 {
        t[1] = x;
        dt[1] = 1.0;
    }
    for m in 1..n.saturating_sub(1) {
        t[m + 1] = 2.0 * x * t[m] - t[m - 1];
        dt[m + 1] = 2.0 * t[m] + 2.0 * x * dt[m] - dt[m - 1];
        ddt[m + 1] = 4.0 * dt[m] + 2.0 * x * ddt[m] - ddt[m - 1];
    }
    (t, dt, ddt)
}

/// Evaluates a Chebyshev series at `x` (Clenshaw).
pub fn cheb_eval<T>(coeffs: &[T], x: f64) -> T
where
    T: Copy + Default + std::ops::Add<Output = T> + std::ops::Sub<Output = T> + std::ops::Mul<f64, Output = T>,
{
    let mut b1 = T::default();
    let mut b2 = T::default();
    for &c in coeffs.iter().skip(1).rev() {
        let b0 = c + b1 * (2.0 * x) - b2;
        b2 = b1;
        b1 = b0;
    }
    match coeffs.first() {
        Some(&c0) => c0 + b1 * x - b2,
        None => T::default(),
    }
}

/// `int_{-1}^{1} T_m(x) dx`.
pub fn cheb_integrals(degree: usize) -> Vec<f64> {
    (0..=degree)
        .map(|m| if m % 2 == 1 { 0.0 } else { 2.0 / (1.0 - (m * m) as f64) })
        .collect()
}

/// Clenshaw–Curtis weights on the Gauss–Lobatto points of degree `n`.
pub fn clenshaw_curtis_weights(n: usize) -> Vec<f64> {
    let nf = n as f64;
    (0..=n)
        .map(|s| {
            let theta = s as f64 * PI / nf;
            let mut v = 1.0;
            for j in 1..=n / 2 {
                let b = if 2 * j == n { 1.0 } else { 2.0 };
                v -= b * (2.0 * j as f64 * theta).cos() / (4.0 * (j * j) as f64 - 1.0);
            }
            let c = if s == 0 || s == n { 1.0 } else { 2.0 };
            c * v / nf
        })
        .collect()
}

/// Real fields sampled on a uniform x1 grid times the Gauss–Lobatto x2 grid.
#[derive(Debug, Clone)]
pub struct PhysicalFields {
    pub x1: Vec<f64>,
    pub x2: Vec<f64>,
    /// One array per field, row-major with x1 as the outer index.
    pub fields: Vec<Vec<f64>>,
    /// Largest discarded imaginary part (roundoff indicator).
    pub max_imag: f64,
}

impl PhysicalFields {
    pub fn at(&self, field: usize, i1: usize, i2: usize) -> f64 {
        self.fields[field][i1 * self.x2.len() + i2]
    }
}

/// Reconstructs physical fields from stored (n >= 0) coefficients.
pub fn to_physical(grid: &ModeGrid, cheb: &ChebMatrices, coeffs: &[C64], nx: usize) -> Result<PhysicalFields> {
    if coeffs.len() != grid.half_len() {
        return Err(Error::Dimension(format!(
            "coefficient vector has length {}, grid expects {}",
            coeffs.len(),
            grid.half_len()
        )));
    }
    if cheb.degree() != grid.n2 {
        return Err(Error::Dimension("Chebyshev tables do not match grid".into()));
    }
    let nc = grid.nc();
    let npts = cheb.len();
    let x1: Vec<f64> = (0..nx).map(|i| grid.period() * i as f64 / nx as f64).collect();
    let norm = grid.fourier_norm();
    let mut fields = vec![vec![0.0; nx * npts]; grid.nfields];
    let mut max_imag: f64 = 0.0;
    let mut vals = vec![C64::default(); npts];
    for (f, out) in fields.iter_mut().enumerate() {
        // values[n][s]
        let mut mode_vals = Vec::with_capacity(grid.n1 + 1);
        for n in 0..=grid.n1 {
            let start = grid.half_index(n, f, 0);
            cheb.apply(0, &coeffs[start..start + nc], &mut vals);
            mode_vals.push(vals.clone());
        }
        for (i, &x) in x1.iter().enumerate() {
            for s in 0..npts {
                let mut acc = mode_vals[0][s];
                for (n, mv) in mode_vals.iter().enumerate().skip(1) {
                    let phase = C64::from_polar(1.0, n as f64 * grid.k * x);
                    // mode n and its conjugate partner -n
                    acc += 2.0 * (mv[s] * phase).re;
                }
                max_imag = max_imag.max((acc.im * norm).abs());
                out[i * npts + s] = acc.re * norm;
            }
        }
    }
    Ok(PhysicalFields { x1, x2: cheb.points.clone(), fields, max_imag })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn gauss_lobatto_small_cases() {
        assert_eq!(gauss_lobatto_points(2).unwrap(), vec![1.0, 0.0, -1.0]);
        let p4 = gauss_lobatto_points(4).unwrap();
        let h = 0.5f64.sqrt();
        for (a, b) in p4.iter().zip([1.0, h, 0.0, -h, -1.0]) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-15);
        }
        let p3 = gauss_lobatto_points(3).unwrap();
        for (a, b) in p3.iter().zip([1.0, 0.5, -0.5, -1.0]) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-15);
        }
        assert!(matches!(gauss_lobatto_points(0), Err(Error::DegenerateGrid(_))));
    }

    #[test]
    fn points_are_strictly_decreasing() {
        let p = gauss_lobatto_points(17).unwrap();
        assert_eq!(p[0], 1.0);
        assert_eq!(p[17], -1.0);
        assert!(p.windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn chebyshev_values_and_endpoint_identity() {
        let (t, _, _) = cheb_values(0.5, 2);
        assert_abs_diff_eq!(t[2], -0.5, epsilon = 1e-15);
        let cheb = cheb_matrices(12).unwrap();
        for m in 0..=12 {
            assert_abs_diff_eq!(cheb.eval[(0, m)], 1.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn derivative_of_x_squared() {
        // x^2 = (T0 + T2) / 2
        let coeffs = [0.5, 0.0, 0.5];
        let (_, dt, ddt) = cheb_values(0.5, 2);
        let d: f64 = coeffs.iter().zip(&dt).map(|(c, t)| c * t).sum();
        let dd: f64 = coeffs.iter().zip(&ddt).map(|(c, t)| c * t).sum();
        assert_abs_diff_eq!(d, 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(dd, 2.0, epsilon = 1e-14);
    }

    /// Chebyshev coefficients of x^p by the recurrence x T_m = (T_{m+1} + T_{|m-1|}) / 2.
    fn monomial_coeffs(p: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; n + 1];
        c[0] = 1.0;
        for _ in 0..p {
            let mut next = vec![0.0; n + 1];
            for m in 0..=n {
                if c[m] == 0.0 {
                    continue;
                }
                if m < n {
                    next[m + 1] += 0.5 * c[m];
                }
                if m == 0 {
                    next[1] += 0.5 * c[m];
                } else {
                    next[m - 1] += 0.5 * c[m];
                }
            }
            // x T_0 = T_1 exactly
            c = next;
        }
        c
    }

    #[test]
    fn derivative_tables_exact_on_monomials() {
        let n = 10;
        let cheb = cheb_matrices(n).unwrap();
        for p in 0..=n {
            let c = monomial_coeffs(p, n);
            for (s, &x) in cheb.points.iter().enumerate() {
                let v: f64 = (0..=n).map(|m| cheb.eval[(s, m)] * c[m]).sum();
                let d: f64 = (0..=n).map(|m| cheb.d1[(s, m)] * c[m]).sum();
                let dd: f64 = (0..=n).map(|m| cheb.d2[(s, m)] * c[m]).sum();
                let pf = p as f64;
                assert_abs_diff_eq!(v, x.powi(p as i32), epsilon = 1e-12);
                let exact_d = if p == 0 { 0.0 } else { pf * x.powi(p as i32 - 1) };
                assert_abs_diff_eq!(d, exact_d, epsilon = 1e-11);
                let exact_dd = if p < 2 { 0.0 } else { pf * (pf - 1.0) * x.powi(p as i32 - 2) };
                assert_abs_diff_eq!(dd, exact_dd, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn clenshaw_curtis_integrates_parabola() {
        for n in 4..20 {
            let cheb = cheb_matrices(n).unwrap();
            let vals: Vec<f64> = cheb.points.iter().map(|x| 1.0 - x * x).collect();
            assert_abs_diff_eq!(cheb.quadrature(&vals), 4.0 / 3.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn clenshaw_evaluation_matches_tables() {
        let coeffs = [0.3, -1.2, 0.7, 0.05, -0.4];
        let (t, _, _) = cheb_values(0.37, 4);
        let direct: f64 = coeffs.iter().zip(&t).map(|(c, t)| c * t).sum();
        assert_abs_diff_eq!(cheb_eval(&coeffs, 0.37), direct, epsilon = 1e-14);
    }

    #[test]
    fn physical_zero_and_constant_mode() {
        let grid = ModeGrid::new(1.3, 2, 6, 3).unwrap();
        let cheb = cheb_matrices(6).unwrap();
        let mut coeffs = vec![C64::default(); grid.half_len()];
        let phys = to_physical(&grid, &cheb, &coeffs, 8).unwrap();
        assert!(phys.fields.iter().flatten().all(|v| *v == 0.0));
        coeffs[grid.half_index(0, 0, 0)] = C64::new(1.0, 0.0);
        let phys = to_physical(&grid, &cheb, &coeffs, 8).unwrap();
        for v in &phys.fields[0] {
            assert_abs_diff_eq!(*v, grid.fourier_norm(), epsilon = 1e-14);
        }
        assert!(to_physical(&grid, &cheb, &coeffs[1..], 8).is_err());
    }

    proptest::proptest! {
        // stored n >= 0 coefficients with a real n = 0 mode describe a real field
        #[test]
        fn physical_fields_are_real(seed in 0u64..1000, n1 in 1usize..4, n2 in 4usize..12) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let grid = ModeGrid::new(1.7, n1, n2, 3).unwrap();
            let cheb = cheb_matrices(n2).unwrap();
            let mut coeffs = vec![C64::default(); grid.half_len()];
            for n in 0..=n1 {
                for f in 0..3 {
                    for m in 0..=n2 {
                        let im = if n == 0 { 0.0 } else { rng.gen_range(-1.0..1.0) };
                        coeffs[grid.half_index(n, f, m)] = C64::new(rng.gen_range(-1.0..1.0), im);
                    }
                }
            }
            let phys = to_physical(&grid, &cheb, &coeffs, 2 * n1 + 3).unwrap();
            proptest::prop_assert!(phys.max_imag <= 1e-13, "{}", phys.max_imag);
        }
    }
}
