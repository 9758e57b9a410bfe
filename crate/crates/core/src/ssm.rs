//! Order-by-order solution of the invariance equation
//! `M DK[R] = A K - B(K, K)` for the embedding `K` and reduced dynamics `R`.
//!
//! Coefficients live on the two-sided representation of the pencil. For a
//! mode-diagonal pencil each monomial `theta^alpha` occupies a single Fourier
//! mode (the sum of the mode numbers of its factors), so every coefficient
//! solve is local to one block.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::eigen::{PencilGeometry, SpectralSplit};
use crate::error::{Error, Result};
use crate::flow::{FlowModel, ModelParams, OperatorPair};
use crate::linalg::{dot_conj, norm2, CMatrix, C64, CONE, CZERO};

/// Exponents of a monomial in the reduced coordinates.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MultiIndex(pub Vec<u32>);

impl MultiIndex {
    pub fn unit(r: usize, q: usize) -> Self {
        let mut a = vec![0; r];
        a[q] = 1;
        MultiIndex(a)
    }

    pub fn order(&self) -> usize {
        self.0.iter().map(|&a| a as usize).sum()
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    /// `theta^alpha`
    pub fn eval(&self, theta: &[C64]) -> C64 {
        self.0.iter().zip(theta).fold(CONE, |acc, (&a, &t)| acc * t.powu(a))
    }

    /// `<alpha, values>`
    pub fn weighted_sum(&self, values: &[C64]) -> C64 {
        self.0.iter().zip(values).map(|(&a, &l)| l * a as f64).sum()
    }

    pub fn add(&self, other: &MultiIndex) -> MultiIndex {
        MultiIndex(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    /// `alpha - e_q`, or `None` if the entry is zero.
    pub fn minus_unit(&self, q: usize) -> Option<MultiIndex> {
        (self.0[q] > 0).then(|| {
            let mut a = self.0.clone();
            a[q] -= 1;
            MultiIndex(a)
        })
    }

    /// Exponents moved along a coordinate permutation: `out[perm[q]] = alpha[q]`.
    pub fn permuted(&self, perm: &[usize]) -> MultiIndex {
        let mut a = vec![0; self.0.len()];
        for (q, &p) in perm.iter().enumerate() {
            a[p] = self.0[q];
        }
        MultiIndex(a)
    }
}

impl std::fmt::Display for MultiIndex {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "(")?;
        for (i, a) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{a}")?;
        }
        write!(f, ")")
    }
}

/// All multi-indices of length `r` and order `j`, reverse-lexicographic.
pub fn enumerate_multiindices(r: usize, j: usize) -> Vec<MultiIndex> {
    fn rec(prefix: &mut Vec<u32>, left: usize, slots: usize, out: &mut Vec<MultiIndex>) {
        if slots == 1 {
            prefix.push(left as u32);
            out.push(MultiIndex(prefix.clone()));
            prefix.pop();
            return;
        }
        for a in (0..=left).rev() {
            prefix.push(a as u32);
            rec(prefix, left - a, slots - 1, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    if r == 0 {
        return out;
    }
    rec(&mut Vec::with_capacity(r), j, r, &mut out);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Style {
    Graph,
    NormalForm,
    Mixed,
}

/// How a single monomial was solved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Treatment {
    Graph,
    NormalForm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Resonance {
    None,
    /// `<alpha, lambda>` is within tolerance of the listed members of the reduced spectrum.
    Internal { q: Vec<usize>, matched: C64 },
    Cross { matched: C64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsmConfig {
    pub order: usize,
    pub style: Style,
    /// Relative distance below which `<alpha, lambda>` counts as an internal resonance.
    pub res_tol: f64,
    /// Cross resonances are only fatal when (numerically) exact; near misses
    /// are left to the bordered-solve conditioning check.
    #[serde(default = "default_cross_tol")]
    pub cross_tol: f64,
    pub err_tol: f64,
}

fn default_cross_tol() -> f64 {
    1e-8
}

impl Default for SsmConfig {
    fn default() -> Self {
        SsmConfig { order: 3, style: Style::Mixed, res_tol: 1e-2, cross_tol: default_cross_tol(), err_tol: 1.5e-2 }
    }
}

impl SsmConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.order < 1 {
            v.push("order must be >= 1".into());
        }
        if !(self.res_tol > 0.0 && self.res_tol.is_finite()) {
            v.push("res_tol must be > 0".into());
        }
        if !(self.cross_tol > 0.0 && self.cross_tol.is_finite()) {
            v.push("cross_tol must be > 0".into());
        }
        if !(self.err_tol > 0.0 && self.err_tol.is_finite()) {
            v.push("err_tol must be > 0".into());
        }
        v
    }
}

/// Quadratic system `M du/dt = A u - B(u, u)` on the two-sided representation.
pub trait QuadraticSystem: Sync {
    fn operators(&self) -> &OperatorPair;
    fn bilinear(&self, x: &[C64], y: &[C64]) -> Result<Vec<C64>>;
    fn geometry(&self) -> &dyn PencilGeometry;
    /// Norm of a residual-space vector (used by the invariance defect).
    fn residual_norm(&self, r: &[C64]) -> f64 {
        norm2(r)
    }
}

/// A flow model linearized about a base state.
pub struct FlowSystem<'a> {
    pub model: &'a FlowModel,
    pub params: ModelParams,
    pub ops: OperatorPair,
}

impl QuadraticSystem for FlowSystem<'_> {
    fn operators(&self) -> &OperatorPair {
        &self.ops
    }

    fn bilinear(&self, x: &[C64], y: &[C64]) -> Result<Vec<C64>> {
        self.model.bilinear_full(&self.params, x, y)
    }

    fn geometry(&self) -> &dyn PencilGeometry {
        self.model
    }

    fn residual_norm(&self, r: &[C64]) -> f64 {
        self.model.residual_l2(r)
    }
}

/// Linear part of the expansion: `A K_1 = M K_1 R_1`, with left vectors `Z^H M K_1 = I`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FirstOrder {
    pub k1: Vec<Vec<C64>>,
    pub left: Vec<Vec<C64>>,
    /// `R_1` as rows: `R^q_1(theta) = sum_k r1[q][k] theta_k`.
    pub r1: Vec<Vec<C64>>,
    pub modes: Vec<Option<i64>>,
    /// Coordinate permutation pairing each coordinate with its conjugate.
    pub conjugate_of: Vec<Option<usize>>,
}

impl FirstOrder {
    pub fn from_split(split: &SpectralSplit) -> Self {
        let r = split.r;
        FirstOrder {
            k1: split.sigma1.iter().map(|m| m.right.clone()).collect(),
            left: split.sigma1.iter().map(|m| m.left.clone()).collect(),
            r1: (0..r)
                .map(|q| (0..r).map(|k| if q == k { split.sigma1[q].value } else { CZERO }).collect())
                .collect(),
            modes: split.sigma1.iter().map(|m| m.mode).collect(),
            conjugate_of: split.conjugate_of.clone(),
        }
    }

    pub fn r(&self) -> usize {
        self.k1.len()
    }

    /// Diagonal of `R_1`.
    pub fn values(&self) -> Vec<C64> {
        (0..self.r()).map(|q| self.r1[q][q]).collect()
    }

    pub fn is_diagonal(&self) -> bool {
        let scale = self.values().iter().fold(1e-300f64, |a, l| a.max(l.norm()));
        (0..self.r()).all(|q| (0..self.r()).all(|k| q == k || self.r1[q][k].norm() <= 1e-14 * scale))
    }

    /// Mode occupied by `theta^alpha`, if all coordinates have one.
    pub fn mode_of(&self, alpha: &MultiIndex) -> Option<i64> {
        let mut m = 0i64;
        for (a, mode) in alpha.0.iter().zip(&self.modes) {
            m += *a as i64 * (*mode)?;
        }
        Some(m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResonanceEntry {
    pub alpha: MultiIndex,
    pub s: C64,
    pub resonance: Resonance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Monomial {
    pub alpha: MultiIndex,
    pub k: Vec<C64>,
    pub r: Vec<C64>,
    pub treatment: Treatment,
    /// Relative residual of the coefficient equation after the solve.
    pub residual: f64,
}

/// Coefficient tables of `K` and `R` through `order`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpansionTable {
    pub r: usize,
    pub order: usize,
    pub style: Style,
    pub first: FirstOrder,
    /// `orders[j - 1]` holds the monomials of order `j`.
    pub orders: Vec<Vec<Monomial>>,
    pub resonance_log: Vec<ResonanceEntry>,
    #[serde(skip)]
    index: HashMap<MultiIndex, (usize, usize)>,
}

impl ExpansionTable {
    /// Table holding only the linear part.
    pub fn first_order(first: FirstOrder, style: Style) -> Self {
        let r = first.r();
        let monos = (0..r)
            .map(|q| Monomial {
                alpha: MultiIndex::unit(r, q),
                k: first.k1[q].clone(),
                r: first.r1.iter().map(|row| row[q]).collect(),
                treatment: Treatment::NormalForm,
                residual: 0.0,
            })
            .collect();
        let mut t = ExpansionTable { r, order: 1, style, first, orders: vec![monos], resonance_log: Vec::new(), index: HashMap::new() };
        t.reindex();
        t
    }

    /// Rebuilds the lookup index (needed after deserialization).
    pub fn reindex(&mut self) {
        self.index.clear();
        for (j, monos) in self.orders.iter().enumerate() {
            for (i, m) in monos.iter().enumerate() {
                self.index.insert(m.alpha.clone(), (j, i));
            }
        }
    }

    pub fn get(&self, alpha: &MultiIndex) -> Option<&Monomial> {
        self.index.get(alpha).map(|&(j, i)| &self.orders[j][i])
    }

    pub fn monomials(&self) -> impl Iterator<Item = &Monomial> {
        self.orders.iter().flatten()
    }

    pub fn dim(&self) -> usize {
        self.first.k1.first().map_or(0, |k| k.len())
    }

    fn push_order(&mut self, monos: Vec<Monomial>) {
        self.orders.push(monos);
        self.order = self.orders.len();
        self.reindex();
    }

    /// `K(theta)` on the two-sided representation.
    pub fn evaluate_k(&self, theta: &[C64]) -> Vec<C64> {
        let mut out = vec![CZERO; self.dim()];
        for m in self.monomials() {
            let w = m.alpha.eval(theta);
            if w == CZERO {
                continue;
            }
            for (o, k) in out.iter_mut().zip(&m.k) {
                *o += w * k;
            }
        }
        out
    }

    /// `R(theta)`
    pub fn evaluate_r(&self, theta: &[C64]) -> Vec<C64> {
        let mut out = vec![CZERO; self.r];
        for m in self.monomials() {
            let w = m.alpha.eval(theta);
            for (o, c) in out.iter_mut().zip(&m.r) {
                *o += w * c;
            }
        }
        out
    }

    /// `DK(theta)[v]`
    pub fn evaluate_dk(&self, theta: &[C64], v: &[C64]) -> Vec<C64> {
        let mut out = vec![CZERO; self.dim()];
        for m in self.monomials() {
            let mut w = CZERO;
            for q in 0..self.r {
                if let Some(b) = m.alpha.minus_unit(q) {
                    w += b.eval(theta) * m.alpha.0[q] as f64 * v[q];
                }
            }
            if w == CZERO {
                continue;
            }
            for (o, k) in out.iter_mut().zip(&m.k) {
                *o += w * k;
            }
        }
        out
    }

    /// Rescales coordinates `theta = s theta'`: coefficients of order `j` pick up `s^j`,
    /// reduced dynamics `s^{j-1}`.
    pub fn rescaled(&self, s: f64) -> ExpansionTable {
        let mut t = self.clone();
        for monos in &mut t.orders {
            for m in monos {
                let j = m.alpha.order() as i32;
                m.k.iter_mut().for_each(|v| *v *= s.powi(j));
                m.r.iter_mut().for_each(|v| *v *= s.powi(j - 1));
            }
        }
        t.first.k1.iter_mut().for_each(|k| k.iter_mut().for_each(|v| *v *= s));
        t.first.left.iter_mut().for_each(|z| z.iter_mut().for_each(|v| *v /= s));
        t
    }
}

/// Internal resonances take precedence over cross resonances.
pub fn classify_resonance(
    alpha: &MultiIndex,
    first: &FirstOrder,
    sigma2: &[(C64, Option<i64>)],
    res_tol: f64,
    cross_tol: f64,
) -> Resonance {
    let values = first.values();
    let s = alpha.weighted_sum(&values);
    let mode = first.mode_of(alpha);
    let same = |m: Option<i64>| match (mode, m) {
        (Some(a), Some(b)) => a == b,
        _ => true,
    };
    let mut q_hit = Vec::new();
    let mut best: Option<(f64, C64)> = None;
    for (q, &l) in values.iter().enumerate() {
        if !same(first.modes[q]) {
            continue;
        }
        let rel = (s - l).norm() / l.norm().max(f64::MIN_POSITIVE);
        if rel < res_tol {
            q_hit.push(q);
            if best.is_none_or(|(b, _)| rel < b) {
                best = Some((rel, l));
            }
        }
    }
    if let Some((_, matched)) = best {
        return Resonance::Internal { q: q_hit, matched };
    }
    for &(l, m) in sigma2 {
        if same(m) && (s - l).norm() / l.norm().max(1.0) < cross_tol {
            return Resonance::Cross { matched: l };
        }
    }
    Resonance::None
}

/// Right-hand sides `eta_{j, alpha}` for every `|alpha| = j`.
pub fn compute_eta(table: &ExpansionTable, j: usize, sys: &dyn QuadraticSystem) -> Result<Vec<(MultiIndex, Vec<C64>)>> {
    if j < 2 {
        return Err(Error::InvalidParameter(format!("eta is defined for orders >= 2, got {j}")));
    }
    if table.order < j - 1 {
        return Err(Error::MissingOrder(table.order + 1));
    }
    let r = table.r;
    let dim = table.dim();
    let alphas = enumerate_multiindices(r, j);
    let pos: HashMap<&MultiIndex, usize> = alphas.iter().enumerate().map(|(i, a)| (a, i)).collect();
    // bilinear pairs
    let mut pairs = Vec::new();
    for a in 1..j {
        for x in &table.orders[a - 1] {
            for y in &table.orders[j - a - 1] {
                pairs.push((x, y));
            }
        }
    }
    let products: Vec<Result<(usize, Vec<C64>)>> = pairs
        .par_iter()
        .map(|(x, y)| Ok((pos[&x.alpha.add(&y.alpha)], sys.bilinear(&x.k, &y.k)?)))
        .collect();
    let mut eta = vec![vec![CZERO; dim]; alphas.len()];
    for p in products {
        let (i, v) = p?;
        for (e, b) in eta[i].iter_mut().zip(&v) {
            *e += b;
        }
    }
    // chain-rule terms sum_{k=2}^{j-1} DK_{j-k+1}[R_k]
    let mut chain = vec![vec![CZERO; dim]; alphas.len()];
    let mut any_chain = vec![false; alphas.len()];
    for k in 2..j {
        for rk in &table.orders[k - 1] {
            if rk.r.iter().all(|c| *c == CZERO) {
                continue;
            }
            for kb in &table.orders[j - k] {
                for q in 0..r {
                    let bq = kb.alpha.0[q];
                    if bq == 0 || rk.r[q] == CZERO {
                        continue;
                    }
                    let target = kb.alpha.minus_unit(q).unwrap().add(&rk.alpha);
                    let i = pos[&target];
                    let w = rk.r[q] * bq as f64;
                    any_chain[i] = true;
                    for (c, v) in chain[i].iter_mut().zip(&kb.k) {
                        *c += w * v;
                    }
                }
            }
        }
    }
    let ops = sys.operators();
    for i in 0..alphas.len() {
        if any_chain[i] {
            let mc = ops.apply_m(&chain[i]);
            for (e, v) in eta[i].iter_mut().zip(&mc) {
                *e += v;
            }
        }
    }
    Ok(alphas.into_iter().zip(eta).collect())
}

/// Rows scaled to unit max-norm before factorization; the condition check
/// then measures the conditioning of the equations rather than their scaling.
fn solve_equilibrated(mut mat: CMatrix, mut rhs: Vec<C64>, alpha: &MultiIndex) -> Result<Vec<C64>> {
    let n = mat.rows();
    for i in 0..n {
        let mut big: f64 = 0.0;
        for j in 0..n {
            big = big.max(mat[(i, j)].norm());
        }
        if big > 0.0 {
            for j in 0..n {
                mat[(i, j)] /= big;
            }
            rhs[i] /= big;
        }
    }
    let lu = mat.lu().map_err(|_| Error::IllConditioned { alpha: alpha.0.clone(), rcond: 0.0 })?;
    let rcond = lu.rcond();
    if rcond < 1e-12 {
        return Err(Error::IllConditioned { alpha: alpha.0.clone(), rcond });
    }
    let mut x = lu.solve(&rhs);
    // one step of iterative refinement
    let ax = mat.mul_vec(&x);
    let res: Vec<C64> = rhs.iter().zip(&ax).map(|(b, a)| b - a).collect();
    let dx = lu.solve(&res);
    x.iter_mut().zip(&dx).for_each(|(a, d)| *a += d);
    Ok(x)
}

/// `(A - s M) K - M K_1 R - eta` relative to `|eta|` (or `|K|` when `eta` vanishes).
fn coefficient_residual(ops: &OperatorPair, first: &FirstOrder, s: C64, k: &[C64], r: &[C64], eta: &[C64]) -> f64 {
    let ak = ops.apply_a(k);
    let mk = ops.apply_m(k);
    let mut lhs: Vec<C64> = ak.iter().zip(&mk).map(|(a, m)| a - s * m).collect();
    let mut k1r = vec![CZERO; k.len()];
    for (q, &c) in r.iter().enumerate() {
        if c != CZERO {
            for (o, v) in k1r.iter_mut().zip(&first.k1[q]) {
                *o += c * v;
            }
        }
    }
    let mk1r = ops.apply_m(&k1r);
    for ((l, m), e) in lhs.iter_mut().zip(&mk1r).zip(eta) {
        *l -= m + e;
    }
    let scale = norm2(eta).max(1e-300);
    norm2(&lhs) / scale
}

/// Solves one monomial equation on the blocks where `eta` lives.
fn solve_monomial(
    sys: &dyn QuadraticSystem,
    first: &FirstOrder,
    alpha: &MultiIndex,
    eta: &[C64],
    constrained: &[usize],
) -> Result<(Vec<C64>, Vec<C64>)> {
    let ops = sys.operators();
    let r = first.r();
    let s = alpha.weighted_sum(&first.values());
    let mut k = vec![CZERO; ops.dim];
    let mut rc = vec![CZERO; r];
    let scale = norm2(eta);
    if scale == 0.0 {
        return Ok((k, rc));
    }
    for blk in &ops.blocks {
        let local_eta = blk.gather(eta);
        if norm2(&local_eta) <= 1e-15 * scale {
            continue;
        }
        let qs: Vec<usize> = constrained
            .iter()
            .copied()
            .filter(|&q| blk.indices.iter().any(|&i| first.k1[q][i] != CZERO))
            .collect();
        let n = blk.dim();
        let nq = qs.len();
        let mut mat = CMatrix::zeros(n + nq, n + nq);
        for j in 0..n {
            for i in 0..n {
                mat[(i, j)] = blk.a[(i, j)] - s * blk.m[(i, j)];
            }
        }
        for (c, &q) in qs.iter().enumerate() {
            let mk = blk.m.mul_vec(&blk.gather(&first.k1[q]));
            let zm = blk.m.adjoint_mul_vec(&blk.gather(&first.left[q]));
            for i in 0..n {
                mat[(i, n + c)] = -mk[i];
                mat[(n + c, i)] = zm[i].conj();
            }
        }
        let mut rhs = local_eta;
        rhs.extend(std::iter::repeat_n(CZERO, nq));
        let x = solve_equilibrated(mat, rhs, alpha)?;
        blk.scatter(&x[..n], &mut k);
        for (c, &q) in qs.iter().enumerate() {
            rc[q] += x[n + c];
        }
    }
    Ok((k, rc))
}

fn treatment_for(style: Style, res: &Resonance, r: usize) -> (Treatment, Vec<usize>) {
    match (style, res) {
        (Style::Graph, _) => (Treatment::Graph, (0..r).collect()),
        (Style::Mixed, Resonance::Internal { .. }) => (Treatment::Graph, (0..r).collect()),
        (_, Resonance::Internal { q, .. }) => (Treatment::NormalForm, q.clone()),
        _ => (Treatment::NormalForm, Vec::new()),
    }
}

/// Solves all coefficient equations of order `j`, appending them to the table.
pub fn solve_order(
    table: &mut ExpansionTable,
    j: usize,
    eta: Vec<(MultiIndex, Vec<C64>)>,
    sigma2: &[(C64, Option<i64>)],
    sys: &dyn QuadraticSystem,
    config: &SsmConfig,
) -> Result<()> {
    if table.order != j - 1 {
        return Err(Error::MissingOrder(table.order + 1));
    }
    let first = table.first.clone();
    let r = first.r();
    let mut log = Vec::with_capacity(eta.len());
    let mut plans = Vec::with_capacity(eta.len());
    for (alpha, e) in eta {
        let res = classify_resonance(&alpha, &first, sigma2, config.res_tol, config.cross_tol);
        let s = alpha.weighted_sum(&first.values());
        if let Resonance::Cross { matched } = res {
            // a vanishing right-hand side is solved by K = 0 whatever the spectrum
            if norm2(&e) > 0.0 {
                return Err(Error::CrossResonance { alpha: alpha.0.clone(), re: matched.re, im: matched.im });
            }
        }
        let (treatment, qs) = treatment_for(config.style, &res, r);
        log.push(ResonanceEntry { alpha: alpha.clone(), s, resonance: res });
        plans.push((alpha, e, treatment, qs));
    }
    let monos: Vec<Monomial> = if first.is_diagonal() {
        plans
            .into_par_iter()
            .map(|(alpha, e, treatment, qs)| {
                let (k, rc) = solve_monomial(sys, &first, &alpha, &e, &qs)?;
                let s = alpha.weighted_sum(&first.values());
                let residual = coefficient_residual(sys.operators(), &first, s, &k, &rc, &e);
                Ok(Monomial { alpha, k, r: rc, treatment, residual })
            })
            .collect::<Result<_>>()?
    } else {
        solve_order_coupled(sys, &first, plans)?
    };
    for m in &monos {
        if m.residual > 1e-9 {
            log::warn!("order {j} monomial {} solved to relative residual {:e}", m.alpha, m.residual);
        }
    }
    table.resonance_log.extend(log);
    table.push_order(monos);
    Ok(())
}

/// Whole-order solve for non-diagonal `R_1`: the term `DK_j[R_1]` couples all
/// monomials of one order. Dense in `(number of monomials) x (dimension)`,
/// so only practical for small systems.
fn solve_order_coupled(
    sys: &dyn QuadraticSystem,
    first: &FirstOrder,
    plans: Vec<(MultiIndex, Vec<C64>, Treatment, Vec<usize>)>,
) -> Result<Vec<Monomial>> {
    let ops = sys.operators();
    let (a, m) = ops.to_dense();
    let d = ops.dim;
    let r = first.r();
    let na = plans.len();
    let pos: HashMap<MultiIndex, usize> = plans.iter().enumerate().map(|(i, p)| (p.0.clone(), i)).collect();
    // unknown layout: [K_0, R_0 (constrained q), K_1, ...]
    let mut offsets = Vec::with_capacity(na);
    let mut total = 0;
    for p in &plans {
        offsets.push(total);
        total += d + p.3.len();
    }
    let mut mat = CMatrix::zeros(total, total);
    let mut rhs = vec![CZERO; total];
    let mk1: Vec<Vec<C64>> = first.k1.iter().map(|k| ops.apply_m(k)).collect();
    let zm: Vec<Vec<C64>> = first.left.iter().map(|z| ops.apply_m_adjoint(z)).collect();
    for (ia, (alpha, e, _, qs)) in plans.iter().enumerate() {
        let o = offsets[ia];
        for col in 0..d {
            for row in 0..d {
                mat[(o + row, o + col)] = a[(row, col)];
            }
        }
        // -(DK_j[R_1])_alpha = -sum beta_q r1[q][k] K_beta over beta - e_q + e_k = alpha
        for q in 0..r {
            for kk in 0..r {
                let c = first.r1[q][kk];
                if c == CZERO {
                    continue;
                }
                let Some(tmp) = alpha.minus_unit(kk) else { continue };
                let mut beta = tmp.0.clone();
                beta[q] += 1;
                let beta = MultiIndex(beta);
                let ib = pos[&beta];
                let w = c * beta.0[q] as f64;
                let ob = offsets[ib];
                for col in 0..d {
                    for row in 0..d {
                        mat[(o + row, ob + col)] -= w * m[(row, col)];
                    }
                }
            }
        }
        for (c, &q) in qs.iter().enumerate() {
            for row in 0..d {
                mat[(o + row, o + d + c)] = -mk1[q][row];
                mat[(o + d + c, o + row)] = zm[q][row].conj();
            }
        }
        rhs[o..o + d].copy_from_slice(e);
    }
    let key = plans.first().map(|p| p.0.clone()).unwrap_or(MultiIndex(vec![]));
    let x = solve_equilibrated(mat, rhs, &key)?;
    let mut out = Vec::with_capacity(na);
    let mut etas = Vec::with_capacity(na);
    for (ia, (alpha, e, treatment, qs)) in plans.into_iter().enumerate() {
        let o = offsets[ia];
        let mut rc = vec![CZERO; r];
        for (c, &q) in qs.iter().enumerate() {
            rc[q] = x[o + d + c];
        }
        out.push(Monomial { alpha, k: x[o..o + d].to_vec(), r: rc, treatment, residual: 0.0 });
        etas.push(e);
    }
    // residual of each coupled equation, evaluated with operator products
    let ks: Vec<Vec<C64>> = out.iter().map(|m| m.k.clone()).collect();
    for (mono, e) in out.iter_mut().zip(&etas) {
        let mut lhs = ops.apply_a(&mono.k);
        for q in 0..r {
            for kk in 0..r {
                let c = first.r1[q][kk];
                if c == CZERO {
                    continue;
                }
                let Some(tmp) = mono.alpha.minus_unit(kk) else { continue };
                let mut beta = tmp.0;
                beta[q] += 1;
                let w = c * beta[q] as f64;
                let mkb = ops.apply_m(&ks[pos[&MultiIndex(beta)]]);
                lhs.iter_mut().zip(&mkb).for_each(|(l, v)| *l -= w * v);
            }
            if mono.r[q] != CZERO {
                lhs.iter_mut().zip(&mk1[q]).for_each(|(l, v)| *l -= mono.r[q] * v);
            }
        }
        let defect: f64 = lhs.iter().zip(e).map(|(l, v)| (l - v).norm_sqr()).sum::<f64>().sqrt();
        mono.residual = defect / norm2(e).max(1e-300);
    }
    Ok(out)
}

/// Solves the expansion through `config.order`.
pub fn compute_expansion(
    first: FirstOrder,
    sigma2: &[(C64, Option<i64>)],
    sys: &dyn QuadraticSystem,
    config: &SsmConfig,
) -> Result<ExpansionTable> {
    let bad = config.violations();
    if !bad.is_empty() {
        return Err(Error::ConfigValidation(bad));
    }
    let mut table = ExpansionTable::first_order(first, config.style);
    for j in 2..=config.order {
        let eta = compute_eta(&table, j, sys)?;
        solve_order(&mut table, j, eta, sigma2, sys, config)?;
        log::info!("solved order {j} ({} monomials)", table.orders[j - 1].len());
    }
    Ok(table)
}

/// Convenience wrapper seeding the expansion from a spectral split.
pub fn compute_expansion_from_split(split: &SpectralSplit, sys: &dyn QuadraticSystem, config: &SsmConfig) -> Result<ExpansionTable> {
    compute_expansion(FirstOrder::from_split(split), &split.sigma2_values, sys, config)
}

/// Invariance defect `A K - B(K, K) - M DK[R]` of the truncated series at `theta`.
///
/// Orders up to the table order cancel, so this equals minus the sum of the
/// right-hand sides of orders `L + 1 ..= 2L`.
pub fn invariance_defect(table: &ExpansionTable, theta: &[C64], sys: &dyn QuadraticSystem) -> Result<Vec<C64>> {
    let ops = sys.operators();
    let k = table.evaluate_k(theta);
    let rv = table.evaluate_r(theta);
    let dk = table.evaluate_dk(theta, &rv);
    let ak = ops.apply_a(&k);
    let bkk = sys.bilinear(&k, &k)?;
    let mdk = ops.apply_m(&dk);
    Ok(ak.iter().zip(&bkk).zip(&mdk).map(|((a, b), m)| a - b - m).collect())
}

/// Norm of the invariance defect at `theta`.
pub fn error_norm(table: &ExpansionTable, theta: &[C64], sys: &dyn QuadraticSystem) -> Result<f64> {
    Ok(sys.residual_norm(&invariance_defect(table, theta, sys)?))
}

/// Reduced coordinates of a conjugate pair at polar radius `rho` and angle `phi`.
pub fn pair_coordinates(rho: f64, phi: f64) -> [C64; 2] {
    let t = C64::from_polar(rho, phi);
    [t, t.conj()]
}

/// Largest radius along the sampled directions below which the defect stays under `err_tol`.
///
/// `directions` are unit vectors in the reduced coordinates; the radius is
/// bracketed on a geometric grid up to `r_max` and refined by bisection.
pub fn fundamental_radius(
    table: &ExpansionTable,
    sys: &dyn QuadraticSystem,
    directions: &[Vec<C64>],
    err_tol: f64,
    r_max: f64,
) -> Result<f64> {
    let mut radius = r_max;
    for dir in directions {
        let err_at = |rho: f64| -> Result<f64> {
            let th: Vec<C64> = dir.iter().map(|d| d * rho).collect();
            error_norm(table, &th, sys)
        };
        let mut lo = 0.0;
        let mut hi = None;
        let mut rho = r_max * 1e-6;
        while rho <= r_max {
            if err_at(rho)? >= err_tol {
                hi = Some(rho);
                break;
            }
            lo = rho;
            rho *= 1.5;
        }
        if hi.is_none() && err_at(r_max)? >= err_tol {
            hi = Some(r_max);
        }
        if let Some(mut hi) = hi {
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi);
                if err_at(mid)? >= err_tol {
                    hi = mid;
                } else {
                    lo = mid;
                }
                if hi - lo <= 1e-10 * hi {
                    break;
                }
            }
            radius = radius.min(lo);
        }
    }
    Ok(radius)
}

/// Largest `|zeta_q^H M K_alpha| / |K_alpha|` over graph-treated monomials of order >= 2.
pub fn graph_tangency_defect(table: &ExpansionTable, ops: &OperatorPair) -> f64 {
    let mut worst: f64 = 0.0;
    for m in table.orders.iter().skip(1).flatten() {
        if m.treatment != Treatment::Graph {
            continue;
        }
        let nk = norm2(&m.k);
        if nk == 0.0 {
            continue;
        }
        let mk = ops.apply_m(&m.k);
        for z in &table.first.left {
            worst = worst.max(dot_conj(z, &mk).norm() / (nk * norm2(z).max(1.0)));
        }
    }
    worst
}

/// Largest relative coefficient residual over all stored orders >= 2.
pub fn max_coefficient_residual(table: &ExpansionTable) -> f64 {
    table.orders.iter().skip(1).flatten().fold(0.0, |a, m| a.max(m.residual))
}

/// Largest deviation from conjugation closure: `K` at the swapped index must equal the conjugate of `K`.
pub fn conjugation_defect(table: &ExpansionTable, geometry: &dyn PencilGeometry) -> Option<f64> {
    let perm: Vec<usize> = table.first.conjugate_of.iter().enumerate().map(|(q, p)| p.unwrap_or(q)).collect();
    let mut worst: f64 = 0.0;
    for m in table.monomials() {
        let partner = table.get(&m.alpha.permuted(&perm))?;
        let conj = geometry.conjugate(&m.k)?;
        let scale = norm2(&m.k).max(1e-300);
        let d: f64 = conj.iter().zip(&partner.k).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>().sqrt();
        worst = worst.max(d / scale);
    }
    Some(worst)
}
