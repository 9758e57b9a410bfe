//! Discretized channel-flow models.
//!
//! Unknowns are modal coefficients; residual rows are collocation values of
//! each equation at the Gauss–Lobatto points, still expanded in Fourier modes.
//! The steady problem is `F(v) = L v - B(v, v) - e_flux = 0`, with the
//! moving-frame advection `c d/dx1` kept inside `B` so that its
//! linearization produces the phase-speed column automatically.
//!
//! Two representations are used:
//! * the stored half form ([`StateVector`], modes `0..=n1`), and
//! * the two-sided form (`-n1..=n1`, plus f and c) for linear algebra.
//!
//! Row replacements on every Fourier mode: velocity rows at both walls carry
//! no-slip conditions. On the mean mode the continuity row at the upper wall
//! and the wall-normal no-slip row at the lower wall are redundant; they pin
//! the two pressure modes (`T_0` and `T_n2`) that the collocated equations
//! leave undetermined.

use serde::{Deserialize, Serialize};

use crate::continuation::{newton_solve, NewtonOptions, NewtonReport, SteadyProblem};
use crate::error::{Error, Result};
use crate::linalg::{CMatrix, RMatrix, C64, CZERO};
use crate::spectral::{cheb_matrices, cheb_values, gauss_lobatto_points, ChebMatrices, ModeGrid};

pub const U1: usize = 0;
pub const U2: usize = 1;
pub const P: usize = 2;
pub const T11: usize = 3;
pub const T12: usize = 4;
pub const T22: usize = 5;

/// Continuity equation row index (shares the pressure slot).
const CONT: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Newtonian,
    #[serde(rename = "oldroydb")]
    OldroydB,
}

impl ModelKind {
    pub fn nfields(self) -> usize {
        match self {
            ModelKind::Newtonian => 3,
            ModelKind::OldroydB => 6,
        }
    }

    pub fn from_nfields(nfields: usize) -> Result<Self> {
        match nfields {
            3 => Ok(ModelKind::Newtonian),
            6 => Ok(ModelKind::OldroydB),
            _ => Err(Error::InvalidParameter(format!("nfields must be 3 or 6, got {nfields}"))),
        }
    }

    pub fn field_names(self) -> &'static [&'static str] {
        match self {
            ModelKind::Newtonian => &["u1", "u2", "p"],
            ModelKind::OldroydB => &["u1", "u2", "p", "T11", "T12", "T22"],
        }
    }
}

/// Physical parameters. `wi`, `beta_visc` and `eps` only matter for Oldroyd-B.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParams {
    pub re: f64,
    #[serde(default)]
    pub wi: f64,
    #[serde(default = "default_beta")]
    pub beta_visc: f64,
    #[serde(default)]
    pub eps: f64,
    /// Probe height for `svf`; `None` selects the model default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub xhat2: Option<f64>,
}

fn default_beta() -> f64 {
    1.0
}

impl ModelParams {
    pub fn newtonian(re: f64) -> Self {
        ModelParams { re, wi: 0.0, beta_visc: 1.0, eps: 0.0, xhat2: None }
    }

    pub fn oldroyd_b(re: f64, wi: f64, beta_visc: f64, eps: f64) -> Self {
        ModelParams { re, wi, beta_visc, eps, xhat2: None }
    }

    /// Lists every violated constraint for the given model.
    pub fn violations(&self, kind: ModelKind) -> Vec<String> {
        let mut v = Vec::new();
        let finite = [self.re, self.wi, self.beta_visc, self.eps];
        if finite.iter().any(|x| !x.is_finite()) {
            v.push("all physical parameters must be finite".to_string());
        }
        if !(self.re >= 0.0) {
            v.push("re must be ≥ 0".to_string());
        }
        if kind == ModelKind::Newtonian && self.re == 0.0 {
            v.push("re must be > 0 for the newtonian model".to_string());
        }
        if !(0.0..=1.0).contains(&self.beta_visc) {
            v.push("beta_visc must lie in [0, 1]".to_string());
        }
        if !(self.eps >= 0.0) {
            v.push("eps must be >= 0".to_string());
        }
        if kind == ModelKind::OldroydB && !(self.wi > 0.0) {
            v.push("wi must be > 0 for the oldroydb model".to_string());
        }
        if let Some(x) = self.xhat2 {
            if !(x > -1.0 && x < 1.0) {
                v.push("xhat2 must lie in (-1, 1)".to_string());
            }
        }
        v
    }

    pub fn validate(&self, kind: ModelKind) -> Result<()> {
        let v = self.violations(kind);
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidParameter(v.join("; ")))
        }
    }

    pub fn get(&self, which: ContinuationParam) -> f64 {
        match which {
            ContinuationParam::Re => self.re,
            ContinuationParam::Wi => self.wi,
        }
    }

    pub fn with(&self, which: ContinuationParam, value: f64) -> Self {
        let mut p = *self;
        match which {
            ContinuationParam::Re => p.re = value,
            ContinuationParam::Wi => p.wi = value,
        }
        p
    }
}

/// Parameter a branch is continued in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContinuationParam {
    Re,
    Wi,
}

/// Whether the phase-fixing row is imposed. Without it the last row pins `c`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhaseCondition {
    Inactive,
    Active,
}

impl PhaseCondition {
    /// Active whenever the state carries streamwise structure.
    pub fn for_state(grid: &ModeGrid, state: &StateVector) -> Self {
        if state.is_parallel(grid) {
            PhaseCondition::Inactive
        } else {
            PhaseCondition::Active
        }
    }
}

/// Stored coefficients for modes `n = 0..=n1` plus the forcing `f` and phase speed `c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateVector {
    pub coeffs: Vec<C64>,
    pub f: f64,
    pub c: f64,
}

impl StateVector {
    pub fn zeros(grid: &ModeGrid) -> Self {
        StateVector { coeffs: vec![CZERO; grid.half_len()], f: 0.0, c: 0.0 }
    }

    pub fn check(&self, grid: &ModeGrid) -> Result<()> {
        if self.coeffs.len() != grid.half_len() {
            return Err(Error::Dimension(format!(
                "state has {} coefficients, grid expects {}",
                self.coeffs.len(),
                grid.half_len()
            )));
        }
        Ok(())
    }

    pub fn get(&self, grid: &ModeGrid, n: usize, field: usize, m: usize) -> C64 {
        self.coeffs[grid.half_index(n, field, m)]
    }

    pub fn set(&mut self, grid: &ModeGrid, n: usize, field: usize, m: usize, v: C64) {
        self.coeffs[grid.half_index(n, field, m)] = v;
    }

    /// Coefficients of one field on one mode.
    pub fn field(&self, grid: &ModeGrid, n: usize, field: usize) -> &[C64] {
        let s = grid.half_index(n, field, 0);
        &self.coeffs[s..s + grid.nc()]
    }

    /// True when every mode `n >= 1` vanishes.
    pub fn is_parallel(&self, grid: &ModeGrid) -> bool {
        self.coeffs[grid.block()..].iter().all(|c| c.norm() == 0.0)
    }

    /// Two-sided coefficient vector using `v_{-n} = conj(v_n)`.
    pub fn to_full(&self, grid: &ModeGrid) -> Vec<C64> {
        let mut full = vec![CZERO; grid.full_dim()];
        let b = grid.block();
        for n in 0..=grid.n1 {
            let src = &self.coeffs[n * b..(n + 1) * b];
            let pos = grid.full_block_start(n as i64);
            full[pos..pos + b].copy_from_slice(src);
            if n > 0 {
                let neg = grid.full_block_start(-(n as i64));
                for (d, s) in full[neg..neg + b].iter_mut().zip(src) {
                    *d = s.conj();
                }
            }
        }
        full[grid.aux_f()] = C64::new(self.f, 0.0);
        full[grid.aux_c()] = C64::new(self.c, 0.0);
        full
    }

    /// Keeps the `n >= 0` half of a two-sided vector; the mean mode, `f` and
    /// `c` are projected onto the reals.
    pub fn from_full(grid: &ModeGrid, full: &[C64]) -> Result<Self> {
        if full.len() != grid.full_dim() {
            return Err(Error::Dimension(format!(
                "two-sided vector has length {}, grid expects {}",
                full.len(),
                grid.full_dim()
            )));
        }
        let b = grid.block();
        let mut coeffs = Vec::with_capacity(grid.half_len());
        for n in 0..=grid.n1 {
            let pos = grid.full_block_start(n as i64);
            if n == 0 {
                coeffs.extend(full[pos..pos + b].iter().map(|c| C64::new(c.re, 0.0)));
            } else {
                coeffs.extend_from_slice(&full[pos..pos + b]);
            }
        }
        Ok(StateVector { coeffs, f: full[grid.aux_f()].re, c: full[grid.aux_c()].re })
    }

    /// Real unknown vector `[a_0, a_1, b_1, ..., a_n1, b_n1, f, c]`.
    pub fn pack_real(&self, grid: &ModeGrid) -> Vec<f64> {
        let b = grid.block();
        let mut x = Vec::with_capacity(grid.full_dim());
        x.extend(self.coeffs[..b].iter().map(|c| c.re));
        for n in 1..=grid.n1 {
            let blk = &self.coeffs[n * b..(n + 1) * b];
            x.extend(blk.iter().map(|c| c.re));
            x.extend(blk.iter().map(|c| c.im));
        }
        x.push(self.f);
        x.push(self.c);
        x
    }

    pub fn unpack_real(grid: &ModeGrid, x: &[f64]) -> Result<Self> {
        if x.len() != grid.full_dim() {
            return Err(Error::Dimension(format!(
                "real vector has length {}, grid expects {}",
                x.len(),
                grid.full_dim()
            )));
        }
        let b = grid.block();
        let mut coeffs = Vec::with_capacity(grid.half_len());
        coeffs.extend(x[..b].iter().map(|&r| C64::new(r, 0.0)));
        for n in 1..=grid.n1 {
            let off = b + 2 * (n - 1) * b;
            for i in 0..b {
                coeffs.push(C64::new(x[off + i], x[off + b + i]));
            }
        }
        Ok(StateVector { coeffs, f: x[x.len() - 2], c: x[x.len() - 1] })
    }

    pub fn add_scaled(&self, s: f64, other: &StateVector) -> StateVector {
        StateVector {
            coeffs: self.coeffs.iter().zip(&other.coeffs).map(|(a, b)| a + b * s).collect(),
            f: self.f + s * other.f,
            c: self.c + s * other.c,
        }
    }

    pub fn scaled(&self, s: f64) -> StateVector {
        StateVector { coeffs: self.coeffs.iter().map(|a| a * s).collect(), f: self.f * s, c: self.c * s }
    }

    /// Shifts the state by `dx` in the streamwise direction.
    pub fn translated(&self, grid: &ModeGrid, dx: f64) -> StateVector {
        let mut out = self.clone();
        let b = grid.block();
        for n in 1..=grid.n1 {
            let ph = C64::from_polar(1.0, -(n as f64) * grid.k * dx);
            for c in &mut out.coeffs[n * b..(n + 1) * b] {
                *c *= ph;
            }
        }
        out
    }

    /// Restricts or zero-pads onto a grid with the same `n2` and field count.
    pub fn resampled(&self, from: &ModeGrid, to: &ModeGrid) -> Result<StateVector> {
        if from.n2 != to.n2 || from.nfields != to.nfields {
            return Err(Error::Dimension("resampling only changes n1".into()));
        }
        let b = from.block();
        let mut out = StateVector::zeros(to);
        let keep = from.n1.min(to.n1) + 1;
        out.coeffs[..keep * b].copy_from_slice(&self.coeffs[..keep * b]);
        out.f = self.f;
        out.c = self.c;
        Ok(out)
    }
}

/// `Val`, `d/dx1` or `d/dx2` of a field.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Deriv {
    Val,
    Dx,
    Dy,
}

/// One quadratic contribution `coef * (x.fa, da) * (y.fb, db)` to equation `out`.
#[derive(Debug, Clone, Copy)]
struct BiTerm {
    out: usize,
    coef: f64,
    xa: (usize, Deriv),
    yb: (usize, Deriv),
}

/// Linear contribution `coef * op(field)` to equation `eq` (op 0, 1, 2 = value, d/dx2, d2/dx2^2).
#[derive(Debug, Clone, Copy)]
struct LinTerm {
    eq: usize,
    field: usize,
    op: usize,
    coef: C64,
    /// Dropped on the wall rows (stress diffusion).
    interior_only: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum RowKind {
    Dynamic,
    Continuity,
    Wall(usize),
    Gauge(usize),
}

/// Point values of all fields and first derivatives for every Fourier mode.
struct PointValues {
    npts: usize,
    n1: usize,
    nfields: usize,
    data: Vec<C64>,
    nonzero: Vec<bool>,
}

impl PointValues {
    fn slot(&self, field: usize, d: Deriv, n: i64) -> usize {
        let di = match d {
            Deriv::Val => 0,
            Deriv::Dx => 1,
            Deriv::Dy => 2,
        };
        let mi = (n + self.n1 as i64) as usize;
        ((mi * self.nfields + field) * 3 + di) * self.npts
    }

    fn get(&self, field: usize, d: Deriv, n: i64) -> &[C64] {
        let s = self.slot(field, d, n);
        &self.data[s..s + self.npts]
    }

    fn mode_nonzero(&self, n: i64) -> bool {
        n.unsigned_abs() as usize <= self.n1 && self.nonzero[(n + self.n1 as i64) as usize]
    }
}

/// Record of the scalar diagnostics of a perturbation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observables {
    pub e: f64,
    pub d: f64,
    pub mwnv: f64,
    pub svf: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_ratio: Option<f64>,
}

/// Constants of the a-priori bound on the spectrum of the linearization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectrumBoundConstants {
    pub a: f64,
    pub b: f64,
    pub c_const: f64,
}

impl SpectrumBoundConstants {
    /// Largest `|Im lambda|` admitted at the given real part, or `None` when
    /// no eigenvalue may have that real part.
    pub fn envelope(&self, re: f64, re_lambda: f64) -> Option<f64> {
        let arg = (-re_lambda + self.c_const) * re;
        (arg >= 0.0).then(|| self.a * arg.sqrt() + self.b)
    }

    /// Checks an eigenvalue against the envelope with a relative slack.
    pub fn admits(&self, re: f64, lambda: C64, slack: f64) -> bool {
        if lambda.re > self.c_const * (1.0 + slack) + 1e-9 {
            return false;
        }
        let bound = self.envelope(re, lambda.re.min(self.c_const)).unwrap_or(0.0);
        lambda.im.abs() <= (1.0 + slack) * bound + 1e-9
    }
}

/// Linear operator and mass operator, stored as independent diagonal blocks.
///
/// A block couples only the two-sided indices listed in `indices`; any pair of
/// indices in different blocks has zero coupling in both operators.
#[derive(Debug, Clone)]
pub struct OperatorBlock {
    /// Fourier mode of the block when the operator is mode-diagonal.
    pub mode: Option<i64>,
    pub indices: Vec<usize>,
    pub a: CMatrix,
    pub m: CMatrix,
}

impl OperatorBlock {
    pub fn dim(&self) -> usize {
        self.indices.len()
    }

    pub fn gather(&self, full: &[C64]) -> Vec<C64> {
        self.indices.iter().map(|&i| full[i]).collect()
    }

    pub fn scatter(&self, local: &[C64], full: &mut [C64]) {
        for (&i, &v) in self.indices.iter().zip(local) {
            full[i] = v;
        }
    }
}

/// The pencil `(A_U, M)` in the two-sided representation.
#[derive(Debug, Clone)]
pub struct OperatorPair {
    pub dim: usize,
    pub blocks: Vec<OperatorBlock>,
}

impl OperatorPair {
    pub fn is_mode_diagonal(&self) -> bool {
        self.blocks.iter().all(|b| b.mode.is_some())
    }

    fn apply_with(&self, x: &[C64], pick: impl Fn(&OperatorBlock) -> &CMatrix) -> Vec<C64> {
        assert_eq!(x.len(), self.dim);
        let mut y = vec![CZERO; self.dim];
        for blk in &self.blocks {
            let local = pick(blk).mul_vec(&blk.gather(x));
            blk.scatter(&local, &mut y);
        }
        y
    }

    pub fn apply_a(&self, x: &[C64]) -> Vec<C64> {
        self.apply_with(x, |b| &b.a)
    }

    pub fn apply_m(&self, x: &[C64]) -> Vec<C64> {
        self.apply_with(x, |b| &b.m)
    }

    /// `M^H x`
    pub fn apply_m_adjoint(&self, x: &[C64]) -> Vec<C64> {
        let mut y = vec![CZERO; self.dim];
        for blk in &self.blocks {
            let local = blk.m.adjoint_mul_vec(&blk.gather(x));
            blk.scatter(&local, &mut y);
        }
        y
    }

    /// Index of the block holding a two-sided index.
    pub fn block_of(&self, idx: usize) -> Option<usize> {
        self.blocks.iter().position(|b| b.indices.contains(&idx))
    }

    /// Dense copies of both operators (small problems and tests only).
    pub fn to_dense(&self) -> (CMatrix, CMatrix) {
        let mut a = CMatrix::zeros(self.dim, self.dim);
        let mut m = CMatrix::zeros(self.dim, self.dim);
        for blk in &self.blocks {
            for (lj, &j) in blk.indices.iter().enumerate() {
                for (li, &i) in blk.indices.iter().enumerate() {
                    a[(i, j)] = blk.a[(li, lj)];
                    m[(i, j)] = blk.m[(li, lj)];
                }
            }
        }
        (a, m)
    }
}

/// Discretization plus cached tables for one grid.
#[derive(Debug, Clone)]
pub struct FlowModel {
    pub grid: ModeGrid,
    pub kind: ModelKind,
    pub cheb: ChebMatrices,
    /// `int T_m T_l`
    gram: RMatrix,
    /// `int T_m' T_l'`
    gram_d: RMatrix,
}

impl FlowModel {
    pub fn new(grid: ModeGrid) -> Result<Self> {
        grid.validate()?;
        Self::build(grid)
    }

    fn build(grid: ModeGrid) -> Result<Self> {
        let kind = ModelKind::from_nfields(grid.nfields)?;
        let cheb = cheb_matrices(grid.n2)?;
        // Clenshaw–Curtis on 2 n2 + 2 points is exact for the degree 2 n2 products.
        let q = cheb_matrices(2 * grid.n2 + 2)?;
        let tabs = ChebMatrices::at_points(&q.points, grid.n2);
        let nc = grid.nc();
        let mut gram = RMatrix::zeros(nc, nc);
        let mut gram_d = RMatrix::zeros(nc, nc);
        for m in 0..nc {
            for l in 0..nc {
                let mut g = 0.0;
                let mut gd = 0.0;
                for s in 0..q.len() {
                    g += q.weights[s] * tabs.eval[(s, m)] * tabs.eval[(s, l)];
                    gd += q.weights[s] * tabs.d1[(s, m)] * tabs.d1[(s, l)];
                }
                gram[(m, l)] = g;
                gram_d[(m, l)] = gd;
            }
        }
        Ok(FlowModel { grid, kind, cheb, gram, gram_d })
    }

    /// Model on the mean mode only, used for x1-independent base states.
    fn mean_model(&self) -> Result<Self> {
        Self::build(self.grid.mean_only())
    }

    fn nc(&self) -> usize {
        self.grid.nc()
    }

    fn n2(&self) -> usize {
        self.grid.n2
    }

    fn kappa(&self, n: i64) -> f64 {
        n as f64 * self.grid.k
    }

    /// Weight of `d/dt` (and of the moving-frame term) in each equation.
    fn time_weight(&self, params: &ModelParams, eq: usize) -> f64 {
        match (self.kind, eq) {
            (_, CONT) => 0.0,
            (ModelKind::Newtonian, _) => 1.0,
            (ModelKind::OldroydB, U1 | U2) => params.re,
            (ModelKind::OldroydB, _) => 1.0,
        }
    }

    fn dynamic_fields(&self) -> Vec<usize> {
        match self.kind {
            ModelKind::Newtonian => vec![U1, U2],
            ModelKind::OldroydB => vec![U1, U2, T11, T12, T22],
        }
    }

    fn row_kind(&self, n: i64, eq: usize, s: usize) -> RowKind {
        let wall = s == 0 || s == self.n2();
        match eq {
            U1 | U2 if wall => {
                if n == 0 && eq == U2 && s == self.n2() {
                    RowKind::Gauge(self.n2())
                } else {
                    RowKind::Wall(eq)
                }
            }
            U1 | U2 => RowKind::Dynamic,
            CONT => {
                if n == 0 && s == 0 {
                    RowKind::Gauge(0)
                } else {
                    RowKind::Continuity
                }
            }
            _ => RowKind::Dynamic,
        }
    }

    /// Row points `s` where equation `eq` is dynamic (carries `M` and `B`).
    fn dynamic_points(&self, eq: usize) -> std::ops::Range<usize> {
        match eq {
            U1 | U2 => 1..self.n2(),
            CONT => 0..0,
            _ => 0..self.nc(),
        }
    }

    fn lin_terms(&self, params: &ModelParams, n: i64) -> Vec<LinTerm> {
        let kap = self.kappa(n);
        let ik = C64::new(0.0, kap);
        let r = |eq, field, op, coef: C64| LinTerm { eq, field, op, coef, interior_only: false };
        let re = |x: f64| C64::new(x, 0.0);
        let mut t = Vec::new();
        match self.kind {
            ModelKind::Newtonian => {
                let nu = 1.0 / params.re;
                t.push(r(U1, U1, 2, re(nu)));
                t.push(r(U1, U1, 0, re(-nu * kap * kap)));
                t.push(r(U1, P, 0, -ik));
                t.push(r(U2, U2, 2, re(nu)));
                t.push(r(U2, U2, 0, re(-nu * kap * kap)));
                t.push(r(U2, P, 1, re(-1.0)));
            }
            ModelKind::OldroydB => {
                let b = params.beta_visc;
                let iwi = 1.0 / params.wi;
                let pol = (1.0 - b) * iwi;
                let eps = params.eps;
                t.push(r(U1, U1, 2, re(b)));
                t.push(r(U1, U1, 0, re(-b * kap * kap)));
                t.push(r(U1, P, 0, -ik));
                t.push(r(U1, T11, 0, ik));
                t.push(r(U1, T12, 1, re(1.0)));
                t.push(r(U2, U2, 2, re(b)));
                t.push(r(U2, U2, 0, re(-b * kap * kap)));
                t.push(r(U2, P, 1, re(-1.0)));
                t.push(r(U2, T12, 0, ik));
                t.push(r(U2, T22, 1, re(1.0)));
                for st in [T11, T12, T22] {
                    t.push(r(st, st, 0, re(-iwi)));
                    if eps != 0.0 {
                        t.push(LinTerm { eq: st, field: st, op: 2, coef: re(eps), interior_only: true });
                        t.push(LinTerm { eq: st, field: st, op: 0, coef: re(-eps * kap * kap), interior_only: true });
                    }
                }
                t.push(r(T11, U1, 0, ik * (2.0 * pol)));
                t.push(r(T12, U1, 1, re(pol)));
                t.push(r(T12, U2, 0, ik * pol));
                t.push(r(T22, U2, 1, re(2.0 * pol)));
            }
        }
        t.push(r(CONT, U1, 0, ik));
        t.push(r(CONT, U2, 1, re(1.0)));
        t
    }

    fn bi_terms(&self, params: &ModelParams) -> Vec<BiTerm> {
        use Deriv::*;
        let term = |out, coef, xa, yb| BiTerm { out, coef, xa, yb };
        let mut t = Vec::new();
        let adv = match self.kind {
            ModelKind::Newtonian => 1.0,
            ModelKind::OldroydB => params.re,
        };
        if adv != 0.0 {
            for out in [U1, U2] {
                t.push(term(out, adv, (U1, Val), (out, Dx)));
                t.push(term(out, adv, (U2, Val), (out, Dy)));
            }
        }
        if self.kind == ModelKind::OldroydB {
            for st in [T11, T12, T22] {
                t.push(term(st, 1.0, (U1, Val), (st, Dx)));
                t.push(term(st, 1.0, (U2, Val), (st, Dy)));
            }
            t.push(term(T11, -2.0, (T11, Val), (U1, Dx)));
            t.push(term(T11, -2.0, (T12, Val), (U1, Dy)));
            t.push(term(T12, -1.0, (T11, Val), (U2, Dx)));
            t.push(term(T12, -1.0, (T12, Val), (U2, Dy)));
            t.push(term(T12, -1.0, (T12, Val), (U1, Dx)));
            t.push(term(T12, -1.0, (T22, Val), (U1, Dy)));
            t.push(term(T22, -2.0, (T12, Val), (U2, Dx)));
            t.push(term(T22, -2.0, (T22, Val), (U2, Dy)));
        }
        t
    }

    fn point_values(&self, full: &[C64]) -> PointValues {
        let g = &self.grid;
        let npts = self.nc();
        let nf = g.nfields;
        let modes = g.modes();
        let mut pv = PointValues { npts, n1: g.n1, nfields: nf, data: vec![CZERO; modes * nf * 3 * npts], nonzero: vec![false; modes] };
        let mut val = vec![CZERO; npts];
        let mut dy = vec![CZERO; npts];
        for n in -(g.n1 as i64)..=g.n1 as i64 {
            let mi = (n + g.n1 as i64) as usize;
            let ik = C64::new(0.0, self.kappa(n));
            for f in 0..nf {
                let st = g.full_index(n, f, 0);
                let coeffs = &full[st..st + npts];
                if coeffs.iter().all(|c| *c == CZERO) {
                    continue;
                }
                pv.nonzero[mi] = true;
                self.cheb.apply(0, coeffs, &mut val);
                self.cheb.apply(1, coeffs, &mut dy);
                let s0 = pv.slot(f, Deriv::Val, n);
                pv.data[s0..s0 + npts].copy_from_slice(&val);
                let s1 = pv.slot(f, Deriv::Dx, n);
                for (d, v) in pv.data[s1..s1 + npts].iter_mut().zip(&val) {
                    *d = ik * v;
                }
                let s2 = pv.slot(f, Deriv::Dy, n);
                pv.data[s2..s2 + npts].copy_from_slice(&dy);
            }
        }
        pv
    }

    fn check_full(&self, v: &[C64]) -> Result<()> {
        if v.len() != self.grid.full_dim() {
            return Err(Error::Dimension(format!(
                "two-sided vector has length {}, grid expects {}",
                v.len(),
                self.grid.full_dim()
            )));
        }
        Ok(())
    }

    /// `B(x, y)` on the two-sided representation; rows are zero outside the dynamic rows.
    pub fn bilinear_full(&self, params: &ModelParams, x: &[C64], y: &[C64]) -> Result<Vec<C64>> {
        self.check_full(x)?;
        self.check_full(y)?;
        Ok(self.bilinear_rows(params, x, y, -(self.grid.n1 as i64)))
    }

    /// `B(x, y)` on rows of modes `n_min..=n1` (plus two zero auxiliary rows).
    fn bilinear_rows(&self, params: &ModelParams, x: &[C64], y: &[C64], n_min: i64) -> Vec<C64> {
        let g = &self.grid;
        let n1 = g.n1 as i64;
        let nc = self.nc();
        let b = g.block();
        let rows = ((n1 - n_min + 1) as usize) * b + 2;
        let mut out = vec![CZERO; rows];
        let px = self.point_values(x);
        let py = self.point_values(y);
        let sn = g.fourier_norm();
        let terms = self.bi_terms(params);
        let mut acc = vec![CZERO; nc];
        for n in n_min..=n1 {
            let base = (n - n_min) as usize * b;
            for t in &terms {
                acc.iter_mut().for_each(|a| *a = CZERO);
                let mut any = false;
                for q in (n - n1).max(-n1)..=(n + n1).min(n1) {
                    let p = n - q;
                    if !px.mode_nonzero(q) || !py.mode_nonzero(p) {
                        continue;
                    }
                    any = true;
                    let xa = px.get(t.xa.0, t.xa.1, q);
                    let yb = py.get(t.yb.0, t.yb.1, p);
                    for s in 0..nc {
                        acc[s] += xa[s] * yb[s];
                    }
                }
                if !any {
                    continue;
                }
                let c = t.coef * sn;
                for s in self.dynamic_points(t.out) {
                    out[base + t.out * nc + s] += acc[s] * c;
                }
            }
            // moving-frame term: -x_c * w * d/dx1 y
            let xc = x[g.aux_c()];
            if xc != CZERO && py.mode_nonzero(n) {
                for f in self.dynamic_fields() {
                    let w = self.time_weight(params, f);
                    if w == 0.0 {
                        continue;
                    }
                    let ydx = py.get(f, Deriv::Dx, n);
                    for s in self.dynamic_points(f) {
                        out[base + f * nc + s] -= xc * w * ydx[s];
                    }
                }
            }
        }
        out
    }

    /// Bilinear term on stored states, returned on the rows of modes `0..=n1`.
    pub fn apply_bilinear(&self, params: &ModelParams, x: &StateVector, y: &StateVector) -> Result<Vec<C64>> {
        x.check(&self.grid)?;
        y.check(&self.grid)?;
        Ok(self.bilinear_rows(params, &x.to_full(&self.grid), &y.to_full(&self.grid), 0))
    }

    /// `L v - e_flux` on rows of modes `n_min..=n1`.
    fn linear_rows(&self, params: &ModelParams, v: &[C64], phase: PhaseCondition, n_min: i64) -> Vec<C64> {
        let g = &self.grid;
        let n1 = g.n1 as i64;
        let b = g.block();
        let rows = ((n1 - n_min + 1) as usize) * b + 2;
        let mut out = vec![CZERO; rows];
        for n in n_min..=n1 {
            let blk = self.linear_block(params, n);
            let st = g.full_block_start(n);
            let y = blk.mul_vec(&v[st..st + b]);
            let base = (n - n_min) as usize * b;
            out[base..base + b].copy_from_slice(&y);
            if n == 0 {
                let fcol = self.f_column();
                for (o, fc) in out[base..base + b].iter_mut().zip(&fcol) {
                    *o += v[g.aux_f()] * fc;
                }
            }
        }
        let (flux, last) = self.aux_rows(phase);
        out[rows - 2] = flux.iter().map(|&(i, c)| c * v[i]).sum::<C64>() - 1.0;
        out[rows - 1] = last.iter().map(|&(i, c)| c * v[i]).sum::<C64>();
        out
    }

    /// Square block of `L` for one Fourier mode (rows `(eq, s)`, cols `(field, m)`).
    fn linear_block(&self, params: &ModelParams, n: i64) -> CMatrix {
        let nc = self.nc();
        let b = self.grid.block();
        let mut blk = CMatrix::zeros(b, b);
        let terms = self.lin_terms(params, n);
        for eq in 0..self.grid.nfields {
            for s in 0..nc {
                let row = eq * nc + s;
                let wall = s == 0 || s == self.n2();
                match self.row_kind(n, eq, s) {
                    RowKind::Dynamic | RowKind::Continuity => {
                        for t in terms.iter().filter(|t| t.eq == eq && !(t.interior_only && wall)) {
                            let tab = self.cheb.table(t.op);
                            for m in 0..nc {
                                blk[(row, t.field * nc + m)] += t.coef * tab[(s, m)];
                            }
                        }
                    }
                    RowKind::Wall(field) => {
                        for m in 0..nc {
                            blk[(row, field * nc + m)] = C64::new(self.cheb.eval[(s, m)], 0.0);
                        }
                    }
                    RowKind::Gauge(m) => {
                        blk[(row, P * nc + m)] = C64::new(1.0, 0.0);
                    }
                }
            }
        }
        blk
    }

    /// Column of the forcing amplitude on the mean-mode block.
    fn f_column(&self) -> Vec<C64> {
        let nc = self.nc();
        let mut col = vec![CZERO; self.grid.block()];
        let v = 1.0 / self.grid.fourier_norm();
        for s in self.dynamic_points(U1) {
            col[U1 * nc + s] = C64::new(v, 0.0);
        }
        col
    }

    /// Sparse flux row and last row (phase condition or `c = 0`), as (two-sided index, coefficient).
    fn aux_rows(&self, phase: PhaseCondition) -> (Vec<(usize, C64)>, Vec<(usize, C64)>) {
        let g = &self.grid;
        let ints = &self.cheb.integrals;
        let sn = g.fourier_norm();
        let flux = (0..g.nc()).filter(|&m| ints[m] != 0.0).map(|m| (g.full_index(0, U1, m), C64::new(0.5 * sn * ints[m], 0.0))).collect();
        let last = match phase {
            PhaseCondition::Active if g.n1 >= 1 => {
                // <u1 + u2, sin(k x1)> up to a positive factor. The u2 term is
                // needed because TS-type waves have odd u1 in mode 1, for which
                // the u1 integral vanishes at every phase.
                let h = C64::new(0.0, -0.5);
                let mut r = Vec::new();
                for f in [U1, U2] {
                    for m in (0..g.nc()).filter(|&m| ints[m] != 0.0) {
                        r.push((g.full_index(1, f, m), h * ints[m]));
                        r.push((g.full_index(-1, f, m), -h * ints[m]));
                    }
                }
                r
            }
            _ => vec![(g.aux_c(), C64::new(1.0, 0.0))],
        };
        (flux, last)
    }

    /// Mass block shared by all Fourier modes.
    fn mass_block(&self, params: &ModelParams) -> CMatrix {
        let nc = self.nc();
        let b = self.grid.block();
        let mut blk = CMatrix::zeros(b, b);
        for f in self.dynamic_fields() {
            let w = self.time_weight(params, f);
            if w == 0.0 {
                continue;
            }
            for s in self.dynamic_points(f) {
                for m in 0..nc {
                    blk[(f * nc + s, f * nc + m)] = C64::new(w * self.cheb.eval[(s, m)], 0.0);
                }
            }
        }
        blk
    }

    /// Full residual `F(v)` on rows of modes `n_min..=n1`.
    fn residual_rows(&self, params: &ModelParams, v: &[C64], phase: PhaseCondition, n_min: i64) -> Vec<C64> {
        let mut r = self.linear_rows(params, v, phase, n_min);
        let bb = self.bilinear_rows(params, v, v, n_min);
        for (a, b) in r.iter_mut().zip(&bb) {
            *a -= b;
        }
        r
    }

    /// Complex residual on the stored rows (modes `0..=n1`, then flux and phase rows).
    pub fn residual(&self, params: &ModelParams, state: &StateVector, phase: PhaseCondition) -> Result<Vec<C64>> {
        state.check(&self.grid)?;
        Ok(self.residual_rows(params, &state.to_full(&self.grid), phase, 0))
    }

    /// Residual on all two-sided rows.
    pub fn residual_full(&self, params: &ModelParams, v: &[C64], phase: PhaseCondition) -> Result<Vec<C64>> {
        self.check_full(v)?;
        Ok(self.residual_rows(params, v, phase, -(self.grid.n1 as i64)))
    }

    /// Adds the `(n, np)` block of `-B(v, .) - B(., v)` (and `L_n` on the diagonal).
    #[allow(clippy::too_many_arguments)]
    fn add_jacobian_block(
        &self,
        params: &ModelParams,
        terms: &[BiTerm],
        pv: &PointValues,
        vc: C64,
        n: i64,
        np: i64,
        out: &mut CMatrix,
        r0: usize,
        c0: usize,
    ) {
        let nc = self.nc();
        let b = self.grid.block();
        if n == np {
            let l = self.linear_block(params, n);
            for j in 0..b {
                for i in 0..b {
                    out[(r0 + i, c0 + j)] += l[(i, j)];
                }
            }
            if vc != CZERO {
                let ik = C64::new(0.0, self.kappa(n));
                for f in self.dynamic_fields() {
                    let w = self.time_weight(params, f);
                    for s in self.dynamic_points(f) {
                        for m in 0..nc {
                            out[(r0 + f * nc + s, c0 + f * nc + m)] += vc * w * ik * self.cheb.eval[(s, m)];
                        }
                    }
                }
            }
        }
        let q = n - np;
        if !pv.mode_nonzero(q) {
            return;
        }
        let sn = self.grid.fourier_norm();
        let ikp = C64::new(0.0, self.kappa(np));
        let op = |d: Deriv, s: usize, m: usize| -> C64 {
            match d {
                Deriv::Val => C64::new(self.cheb.eval[(s, m)], 0.0),
                Deriv::Dy => C64::new(self.cheb.d1[(s, m)], 0.0),
                Deriv::Dx => ikp * self.cheb.eval[(s, m)],
            }
        };
        for t in terms {
            let c = -t.coef * sn;
            let xa = pv.get(t.xa.0, t.xa.1, q);
            let yb = pv.get(t.yb.0, t.yb.1, q);
            for s in self.dynamic_points(t.out) {
                let row = r0 + t.out * nc + s;
                let (xs, ys) = (xa[s] * c, yb[s] * c);
                for m in 0..nc {
                    if xs != CZERO {
                        out[(row, c0 + t.yb.0 * nc + m)] += xs * op(t.yb.1, s, m);
                    }
                    if ys != CZERO {
                        out[(row, c0 + t.xa.0 * nc + m)] += ys * op(t.xa.1, s, m);
                    }
                }
            }
        }
    }

    /// Column `dF/dc` restricted to the rows of mode `n`.
    fn c_column_block(&self, params: &ModelParams, pv: &PointValues, n: i64) -> Vec<C64> {
        let nc = self.nc();
        let mut col = vec![CZERO; self.grid.block()];
        if !pv.mode_nonzero(n) {
            return col;
        }
        for f in self.dynamic_fields() {
            let w = self.time_weight(params, f);
            let dx = pv.get(f, Deriv::Dx, n);
            for s in self.dynamic_points(f) {
                col[f * nc + s] = dx[s] * w;
            }
        }
        col
    }

    /// Jacobian rows of modes `n_min..=n1` against all two-sided columns.
    fn jacobian_rows(&self, params: &ModelParams, v: &[C64], phase: PhaseCondition, n_min: i64) -> CMatrix {
        let g = &self.grid;
        let n1 = g.n1 as i64;
        let b = g.block();
        let rows = ((n1 - n_min + 1) as usize) * b + 2;
        let d = g.full_dim();
        let mut j = CMatrix::zeros(rows, d);
        let pv = self.point_values(v);
        let terms = self.bi_terms(params);
        let vc = v[g.aux_c()];
        let fcol = self.f_column();
        for n in n_min..=n1 {
            let r0 = (n - n_min) as usize * b;
            for np in -n1..=n1 {
                if n != np && !pv.mode_nonzero(n - np) {
                    continue;
                }
                self.add_jacobian_block(params, &terms, &pv, vc, n, np, &mut j, r0, g.full_block_start(np));
            }
            if n == 0 {
                for (i, fc) in fcol.iter().enumerate() {
                    j[(r0 + i, g.aux_f())] += fc;
                }
            }
            for (i, cc) in self.c_column_block(params, &pv, n).iter().enumerate() {
                j[(r0 + i, g.aux_c())] += cc;
            }
        }
        let (flux, last) = self.aux_rows(phase);
        for (i, c) in flux {
            j[(rows - 2, i)] += c;
        }
        for (i, c) in last {
            j[(rows - 1, i)] += c;
        }
        j
    }

    /// Real residual and Jacobian in the packed real unknowns
    /// `[a_0, a_1, b_1, ..., f, c]` with rows `[Re F_0, Re F_1, Im F_1, ..., flux, phase]`.
    pub fn assemble_steady(&self, params: &ModelParams, state: &StateVector, phase: PhaseCondition) -> Result<(Vec<f64>, RMatrix)> {
        state.check(&self.grid)?;
        let v = state.to_full(&self.grid);
        let res = self.residual_rows(params, &v, phase, 0);
        let jc = self.jacobian_rows(params, &v, phase, 0);
        Ok((self.fold_residual(&res), self.fold_jacobian(&jc)))
    }

    /// Real residual only.
    pub fn steady_residual(&self, params: &ModelParams, state: &StateVector, phase: PhaseCondition) -> Result<Vec<f64>> {
        Ok(self.fold_residual(&self.residual(params, state, phase)?))
    }

    fn fold_residual(&self, res: &[C64]) -> Vec<f64> {
        let b = self.grid.block();
        let mut out = Vec::with_capacity(self.grid.full_dim());
        out.extend(res[..b].iter().map(|c| c.re));
        for n in 1..=self.grid.n1 {
            let blk = &res[n * b..(n + 1) * b];
            out.extend(blk.iter().map(|c| c.re));
            out.extend(blk.iter().map(|c| c.im));
        }
        let len = res.len();
        out.push(res[len - 2].re);
        out.push(res[len - 1].re);
        out
    }

    /// Folds Jacobian rows `0..=n1` into the real packed form.
    fn fold_jacobian(&self, jc: &CMatrix) -> RMatrix {
        let g = &self.grid;
        let b = g.block();
        let d = g.full_dim();
        let rows_c = jc.rows();
        // complex row -> (real row of Re part, optional real row of Im part)
        let row_map = |i: usize| -> (usize, Option<usize>) {
            if i >= rows_c - 2 {
                (d - (rows_c - i), None)
            } else if i < b {
                (i, None)
            } else {
                let n = i / b;
                let off = b + 2 * (n - 1) * b;
                (off + i % b, Some(off + b + i % b))
            }
        };
        let mut jr = RMatrix::zeros(d, d);
        let put = |jr: &mut RMatrix, col_r: usize, colv: &dyn Fn(usize) -> C64| {
            for i in 0..rows_c {
                let v = colv(i);
                if v == CZERO {
                    continue;
                }
                let (re_row, im_row) = row_map(i);
                jr[(re_row, col_r)] = v.re;
                if let Some(ir) = im_row {
                    jr[(ir, col_r)] = v.im;
                }
            }
        };
        for m in 0..b {
            let c0 = g.full_block_start(0) + m;
            put(&mut jr, m, &|i| jc[(i, c0)]);
        }
        for n in 1..=g.n1 {
            let off = b + 2 * (n - 1) * b;
            for m in 0..b {
                let cp = g.full_block_start(n as i64) + m;
                let cn = g.full_block_start(-(n as i64)) + m;
                put(&mut jr, off + m, &|i| jc[(i, cp)] + jc[(i, cn)]);
                put(&mut jr, off + b + m, &|i| C64::new(0.0, 1.0) * (jc[(i, cp)] - jc[(i, cn)]));
            }
        }
        put(&mut jr, d - 2, &|i| jc[(i, g.aux_f())]);
        put(&mut jr, d - 1, &|i| jc[(i, g.aux_c())]);
        jr
    }

    /// Linearization `A_U` and mass operator `M` about a steady base.
    ///
    /// An x1-independent base without phase condition yields one block per
    /// Fourier mode; otherwise a single dense block is assembled.
    pub fn assemble_linearization(&self, params: &ModelParams, base: &StateVector, phase: PhaseCondition) -> Result<OperatorPair> {
        base.check(&self.grid)?;
        let g = &self.grid;
        let d = g.full_dim();
        let b = g.block();
        let n1 = g.n1 as i64;
        let v = base.to_full(g);
        let mass = self.mass_block(params);
        if base.is_parallel(g) && phase == PhaseCondition::Inactive {
            let pv = self.point_values(&v);
            let terms = self.bi_terms(params);
            let vc = v[g.aux_c()];
            let (flux, last) = self.aux_rows(phase);
            let mut blocks = Vec::with_capacity(g.modes());
            for n in -n1..=n1 {
                let aux = if n == 0 { 2 } else { 0 };
                let dim = b + aux;
                let start = g.full_block_start(n);
                let mut indices: Vec<usize> = (start..start + b).collect();
                let mut a = CMatrix::zeros(dim, dim);
                self.add_jacobian_block(params, &terms, &pv, vc, n, n, &mut a, 0, 0);
                let mut m = CMatrix::zeros(dim, dim);
                for j in 0..b {
                    for i in 0..b {
                        m[(i, j)] = mass[(i, j)];
                    }
                }
                if n == 0 {
                    indices.push(g.aux_f());
                    indices.push(g.aux_c());
                    for (i, fc) in self.f_column().iter().enumerate() {
                        a[(i, b)] += fc;
                    }
                    for (i, cc) in self.c_column_block(params, &pv, 0).iter().enumerate() {
                        a[(i, b + 1)] += cc;
                    }
                    let local = |idx: usize| -> usize {
                        if idx == g.aux_f() {
                            b
                        } else if idx == g.aux_c() {
                            b + 1
                        } else {
                            idx - start
                        }
                    };
                    for &(i, c) in &flux {
                        a[(b, local(i))] += c;
                    }
                    for &(i, c) in &last {
                        a[(b + 1, local(i))] += c;
                    }
                }
                blocks.push(OperatorBlock { mode: Some(n), indices, a, m });
            }
            return Ok(OperatorPair { dim: d, blocks });
        }
        let a = self.jacobian_rows(params, &v, phase, -n1);
        let mut m = CMatrix::zeros(d, d);
        for n in -n1..=n1 {
            let st = g.full_block_start(n);
            for j in 0..b {
                for i in 0..b {
                    m[(st + i, st + j)] = mass[(i, j)];
                }
            }
        }
        Ok(OperatorPair { dim: d, blocks: vec![OperatorBlock { mode: None, indices: (0..d).collect(), a, m }] })
    }

    /// Directional derivative check helper: `A_U w` built from the residual on all rows.
    pub fn linearization_apply(&self, params: &ModelParams, base: &StateVector, phase: PhaseCondition, w: &[C64]) -> Result<Vec<C64>> {
        self.check_full(w)?;
        let v = base.to_full(&self.grid);
        let mut y = self.linear_rows(params, w, phase, -(self.grid.n1 as i64));
        // remove the constant flux offset that linear_rows includes
        let len = y.len();
        y[len - 2] += 1.0;
        let b1 = self.bilinear_rows(params, &v, w, -(self.grid.n1 as i64));
        let b2 = self.bilinear_rows(params, w, &v, -(self.grid.n1 as i64));
        for ((a, p), q) in y.iter_mut().zip(&b1).zip(&b2) {
            *a -= p + q;
        }
        Ok(y)
    }

    /// `int |u|^2` over the domain for a two-sided vector (pressure, stress and auxiliaries ignored).
    pub fn velocity_norm_sqr(&self, full: &[C64]) -> f64 {
        let g = &self.grid;
        let mut s = 0.0;
        for n in -(g.n1 as i64)..=g.n1 as i64 {
            for f in [U1, U2] {
                let st = g.full_index(n, f, 0);
                s += self.quad_form(&self.gram, &full[st..st + g.nc()]);
            }
        }
        s
    }

    /// Quadrature `L2` norm of the dynamic rows of a two-sided residual vector.
    ///
    /// Collocated values are weighted with the Clenshaw-Curtis weights of the
    /// Gauss-Lobatto points; Fourier modes are orthonormal.
    pub fn residual_l2(&self, rows: &[C64]) -> f64 {
        let g = &self.grid;
        let w = &self.cheb.weights;
        let mut s = 0.0;
        for n in -(g.n1 as i64)..=g.n1 as i64 {
            for f in self.dynamic_fields() {
                let st = g.full_index(n, f, 0);
                for p in self.dynamic_points(f) {
                    s += w[p] * rows[st + p].norm_sqr();
                }
            }
        }
        s.sqrt()
    }

    /// `J(v)_n = conj(v_{-n})`: the image of a two-sided vector under complex conjugation in physical space.
    pub fn conjugate_full(&self, full: &[C64]) -> Vec<C64> {
        let g = &self.grid;
        let b = g.block();
        let mut out = vec![CZERO; full.len()];
        for n in -(g.n1 as i64)..=g.n1 as i64 {
            let src = g.full_block_start(-n);
            let dst = g.full_block_start(n);
            for i in 0..b {
                out[dst + i] = full[src + i].conj();
            }
        }
        out[g.aux_f()] = full[g.aux_f()].conj();
        out[g.aux_c()] = full[g.aux_c()].conj();
        out
    }

    /// Default probe height for `svf`.
    pub fn default_xhat2(&self) -> f64 {
        match self.kind {
            ModelKind::Newtonian => 0.0,
            ModelKind::OldroydB => {
                let pts = gauss_lobatto_points(self.n2()).expect("n2 >= 4");
                pts[10.min(self.n2())]
            }
        }
    }

    /// Steady x1-independent base state with unit mean streamwise velocity.
    pub fn laminar_state(&self, params: &ModelParams) -> Result<StateVector> {
        params.validate(self.kind)?;
        let mean = self.mean_model()?;
        let mg = mean.grid;
        let mut guess = StateVector::zeros(&mg);
        let sn = mg.fourier_norm();
        // U = 1.5 (1 - x^2) = 0.75 T0 - 0.75 T2
        guess.set(&mg, 0, U1, 0, C64::new(0.75 / sn, 0.0));
        guess.set(&mg, 0, U1, 2, C64::new(-0.75 / sn, 0.0));
        match self.kind {
            ModelKind::Newtonian => guess.f = 3.0 / params.re,
            ModelKind::OldroydB => {
                guess.f = 3.0;
                // T12 = (1 - beta) U' = -3 (1 - beta) x = -3 (1 - beta) T1
                let t12 = -3.0 * (1.0 - params.beta_visc);
                guess.set(&mg, 0, T12, 1, C64::new(t12 / sn, 0.0));
                // T11 = 2 Wi T12 U' = 18 Wi (1 - beta) x^2 = 9 Wi (1 - beta) (T0 + T2)
                let t11 = 9.0 * params.wi * (1.0 - params.beta_visc);
                guess.set(&mg, 0, T11, 0, C64::new(t11 / sn, 0.0));
                guess.set(&mg, 0, T11, 2, C64::new(t11 / sn, 0.0));
            }
        }
        let problem = SteadyFlow::new(&mean, *params, ContinuationParam::Re, PhaseCondition::Inactive);
        let x0 = guess.pack_real(&mg);
        let report = newton_solve(&problem, &x0, params.re, &NewtonOptions { tol: 1e-12, max_iter: 25 })?;
        let sol = StateVector::unpack_real(&mg, &report.x)?;
        let mut out = StateVector::zeros(&self.grid);
        out.coeffs[..mg.block()].copy_from_slice(&sol.coeffs);
        out.f = sol.f;
        out.c = 0.0;
        Ok(out)
    }

    /// Real travelling-wave direction from a critical eigenpair of the laminar
    /// linearization in Fourier mode `+-1`: `v + conj(v)` shifted to satisfy the
    /// phase condition and scaled to unit packed norm, with phase speed `-Im(lambda) / (mode k)`.
    pub fn bifurcation_direction(&self, value: C64, mode: i64, vector: &[C64]) -> Result<(StateVector, f64)> {
        let g = &self.grid;
        if mode.abs() != 1 {
            return Err(Error::InvalidParameter(format!("travelling-wave direction needs a mode +-1 eigenvector, got mode {mode}")));
        }
        let conj = self.conjugate_full(vector);
        let sum: Vec<C64> = vector.iter().zip(&conj).map(|(a, b)| a + b).collect();
        let mut dir = StateVector::from_full(g, &sum)?;
        dir.f = 0.0;
        dir.c = 0.0;
        let q: C64 = (0..g.nc()).map(|m| (dir.get(g, 1, U1, m) + dir.get(g, 1, U2, m)) * self.cheb.integrals[m]).sum();
        if q.norm() > 0.0 {
            dir = dir.translated(g, q.arg() / g.k);
        }
        let x = dir.pack_real(g);
        let nrm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(nrm > 0.0) {
            return Err(Error::InvalidParameter("eigenvector has no real part in the stored modes".into()));
        }
        Ok((dir.scaled(1.0 / nrm), -value.im / (mode as f64 * g.k)))
    }

    /// Newton solve of the steady (travelling-wave) problem from a guess.
    pub fn solve_steady(
        &self,
        params: &ModelParams,
        guess: &StateVector,
        phase: PhaseCondition,
        opts: &NewtonOptions,
    ) -> Result<(StateVector, NewtonReport)> {
        guess.check(&self.grid)?;
        let problem = SteadyFlow::new(self, *params, ContinuationParam::Re, phase);
        let report = newton_solve(&problem, &guess.pack_real(&self.grid), params.re, opts)?;
        Ok((StateVector::unpack_real(&self.grid, &report.x)?, report))
    }

    fn quad_form(&self, g: &RMatrix, a: &[C64]) -> f64 {
        let nc = self.nc();
        let mut s = 0.0;
        for m in 0..nc {
            if a[m] == CZERO {
                continue;
            }
            for l in 0..nc {
                s += (a[m].conj() * a[l]).re * g[(m, l)];
            }
        }
        s
    }

    /// Energy, dissipation, mean wall-normal velocity, probe velocity and, for
    /// Oldroyd-B with a base supplied, the relative polymer stress trace.
    pub fn observables(&self, params: &ModelParams, u: &StateVector, base: Option<&StateVector>) -> Result<Observables> {
        u.check(&self.grid)?;
        let g = &self.grid;
        let sn = g.fourier_norm();
        let mut energy = 0.0;
        let mut diss = 0.0;
        for n in 0..=g.n1 {
            let mult = if n == 0 { 1.0 } else { 2.0 };
            let kap2 = self.kappa(n as i64).powi(2);
            for f in [U1, U2] {
                let c = u.field(g, n, f);
                let l2 = self.quad_form(&self.gram, c);
                energy += mult * l2;
                diss += mult * (kap2 * l2 + self.quad_form(&self.gram_d, c));
            }
        }
        let ints = &self.cheb.integrals;
        let xhat = params.xhat2.unwrap_or_else(|| self.default_xhat2());
        let (tx, _, _) = cheb_values(xhat, g.n2);
        let mut mwnv = 0.0;
        let mut svf = 0.0;
        for n in 0..=g.n1 {
            let mult = if n == 0 { 1.0 } else { 2.0 };
            let c2 = u.field(g, n, U2);
            let c1 = u.field(g, n, U1);
            mwnv += mult * c2.iter().zip(ints).map(|(c, i)| c.re * i).sum::<f64>();
            svf += mult * c1.iter().zip(&tx).map(|(c, t)| c.re * t).sum::<f64>();
        }
        let t_ratio = match (self.kind, base) {
            (ModelKind::OldroydB, Some(b)) => {
                let tr = |s: &StateVector| -> f64 {
                    [T11, T22].iter().map(|&f| s.field(g, 0, f).iter().zip(ints).map(|(c, i)| c.re * i).sum::<f64>()).sum()
                };
                let tb = tr(b);
                Some((tb + tr(u)) / tb)
            }
            _ => None,
        };
        Ok(Observables { e: 0.5 * energy, d: diss.sqrt(), mwnv: sn * mwnv, svf: sn * svf, t_ratio })
    }

    /// Maxima of `|U - c e1|`, `|curl U|` and `|grad U|` on a 4x oversampled grid.
    pub fn spectrum_bound_constants(&self, base: &StateVector) -> Result<SpectrumBoundConstants> {
        base.check(&self.grid)?;
        let g = &self.grid;
        let pts = gauss_lobatto_points(4 * g.n2)?;
        let tabs = ChebMatrices::at_points(&pts, g.n2);
        let nx = if base.is_parallel(g) { 1 } else { 4 * g.modes() };
        let sn = g.fourier_norm();
        let ny = pts.len();
        // point values per mode: (u1, u2, du1, du2)
        let mut vals = vec![[vec![CZERO; ny], vec![CZERO; ny], vec![CZERO; ny], vec![CZERO; ny]]; g.n1 + 1];
        for (n, v) in vals.iter_mut().enumerate() {
            let c1 = base.field(g, n, U1);
            let c2 = base.field(g, n, U2);
            for s in 0..ny {
                for m in 0..g.nc() {
                    v[0][s] += c1[m] * tabs.eval[(s, m)];
                    v[1][s] += c2[m] * tabs.eval[(s, m)];
                    v[2][s] += c1[m] * tabs.d1[(s, m)];
                    v[3][s] += c2[m] * tabs.d1[(s, m)];
                }
            }
        }
        let (mut a, mut b, mut c) = (0.0f64, 0.0f64, 0.0f64);
        for i in 0..nx {
            let x = g.period() * i as f64 / nx as f64;
            for s in 0..ny {
                let (mut u1, mut u2, mut u1x, mut u1y, mut u2x, mut u2y) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
                for (n, v) in vals.iter().enumerate() {
                    let mult = if n == 0 { 1.0 } else { 2.0 };
                    let ph = C64::from_polar(1.0, n as f64 * g.k * x);
                    let ik = C64::new(0.0, self.kappa(n as i64));
                    u1 += mult * (v[0][s] * ph).re;
                    u2 += mult * (v[1][s] * ph).re;
                    u1x += mult * (ik * v[0][s] * ph).re;
                    u2x += mult * (ik * v[1][s] * ph).re;
                    u1y += mult * (v[2][s] * ph).re;
                    u2y += mult * (v[3][s] * ph).re;
                }
                let (u1, u2) = (sn * u1 - base.c, sn * u2);
                let (u1x, u1y, u2x, u2y) = (sn * u1x, sn * u1y, sn * u2x, sn * u2y);
                a = a.max((u1 * u1 + u2 * u2).sqrt());
                b = b.max((u2x - u1y).abs());
                c = c.max((u1x * u1x + u1y * u1y + u2x * u2x + u2y * u2y).sqrt());
            }
        }
        Ok(SpectrumBoundConstants { a, b, c_const: c })
    }
}

/// Steady flow problem in packed real unknowns with one free parameter.
pub struct SteadyFlow<'a> {
    pub model: &'a FlowModel,
    pub params: ModelParams,
    pub param: ContinuationParam,
    pub phase: PhaseCondition,
}

impl<'a> SteadyFlow<'a> {
    pub fn new(model: &'a FlowModel, params: ModelParams, param: ContinuationParam, phase: PhaseCondition) -> Self {
        SteadyFlow { model, params, param, phase }
    }

    fn at(&self, p: f64) -> ModelParams {
        self.params.with(self.param, p)
    }
}

impl SteadyProblem for SteadyFlow<'_> {
    fn dim(&self) -> usize {
        self.model.grid.full_dim()
    }

    fn residual(&self, x: &[f64], p: f64) -> Result<Vec<f64>> {
        let s = StateVector::unpack_real(&self.model.grid, x)?;
        self.model.steady_residual(&self.at(p), &s, self.phase)
    }

    fn residual_and_jacobian(&self, x: &[f64], p: f64) -> Result<(Vec<f64>, RMatrix)> {
        let s = StateVector::unpack_real(&self.model.grid, x)?;
        self.model.assemble_steady(&self.at(p), &s, self.phase)
    }
}
