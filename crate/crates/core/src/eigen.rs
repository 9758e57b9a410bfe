//! Generalized eigenproblem `A x = lambda M x` with singular `M`.
//!
//! Blocks up to `dense_threshold` unknowns go through QZ; larger blocks use
//! shift-invert Arnoldi on `(A - sigma M)^{-1} M`. Infinite eigenvalues of the
//! singular pencil are discarded in both paths.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{FlowModel, OperatorBlock, OperatorPair};
use crate::linalg::{dot_conj, eig, norm2, qz, CMatrix, Lu, C64, CONE, CZERO};

/// Norm and conjugation structure used to normalize eigenvectors.
pub trait PencilGeometry: Sync {
    /// Squared norm used for normalization (`k` is scaled to unit norm).
    fn norm_sqr(&self, v: &[C64]) -> f64 {
        v.iter().map(|c| c.norm_sqr()).sum()
    }

    /// Vector image of the conjugate eigenvalue, when the pencil is real in this sense.
    fn conjugate(&self, _v: &[C64]) -> Option<Vec<C64>> {
        None
    }
}

/// Plain Euclidean geometry, no conjugation symmetry.
pub struct Euclidean;

impl PencilGeometry for Euclidean {}

impl PencilGeometry for FlowModel {
    /// Unit norm here means perturbation energy `e = 1/2`.
    fn norm_sqr(&self, v: &[C64]) -> f64 {
        self.velocity_norm_sqr(v)
    }

    fn conjugate(&self, v: &[C64]) -> Option<Vec<C64>> {
        Some(self.conjugate_full(v))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EigenOptions {
    pub shift: C64,
    /// Number of leading pairs that keep their eigenvectors (and the Arnoldi target count).
    pub count: usize,
    pub dense_threshold: usize,
    /// Krylov dimension; `None` selects `2 count + 20`.
    pub krylov_dim: Option<usize>,
    pub max_restarts: usize,
    /// Relative Ritz residual for Arnoldi convergence.
    pub tol: f64,
}

impl Default for EigenOptions {
    fn default() -> Self {
        EigenOptions {
            shift: C64::new(0.1, 0.05),
            count: 6,
            dense_threshold: 1500,
            krylov_dim: None,
            max_restarts: 60,
            tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigenPair {
    pub value: C64,
    /// Fourier mode of the owning block for mode-diagonal pencils.
    pub mode: Option<i64>,
    /// Two-sided right eigenvector, normalized, present for the leading pairs.
    #[serde(skip)]
    pub vector: Option<Vec<C64>>,
    /// `|A k - lambda M k| / |k|` (Euclidean), when the vector is kept.
    pub residual: Option<f64>,
}

/// Eigenvalues above this modulus are treated as infinite. The pressure
/// constraint makes the infinite eigenvalues of the pencil defective, so
/// rounding splits them to roughly `|A| / sqrt(eps)`, far above any physical
/// eigenvalue of a desk-scale grid.
const INFINITE: f64 = 1e8;

/// Relative cut on `mu = 1 / (lambda - sigma)` against the largest `|mu|` found.
const MU_CUT: f64 = 1e-10;

fn sort_desc(pairs: &mut [EigenPair]) {
    pairs.sort_by(|a, b| b.value.re.total_cmp(&a.value.re).then(b.value.im.total_cmp(&a.value.im)));
}

/// Scales to unit geometry norm and makes the largest entry real positive.
fn normalize_vector(v: &mut [C64], geometry: &dyn PencilGeometry) {
    let mut nrm = geometry.norm_sqr(v).sqrt();
    if !(nrm > 1e-300) {
        nrm = norm2(v);
    }
    let big = v.iter().copied().max_by(|a, b| a.norm().total_cmp(&b.norm())).unwrap_or(CONE);
    let phase = if big.norm() > 0.0 { big.conj() / big.norm() } else { CONE };
    let s = phase / nrm;
    v.iter_mut().for_each(|x| *x *= s);
}

fn block_residual(blk: &OperatorBlock, lambda: C64, local: &[C64]) -> f64 {
    let ak = blk.a.mul_vec(local);
    let mk = blk.m.mul_vec(local);
    let r: f64 = ak.iter().zip(&mk).map(|(a, m)| (a - lambda * m).norm_sqr()).sum::<f64>().sqrt();
    r / norm2(local)
}

/// Factorization of `A - sigma M`, reporting a singular pencil as a shift error.
fn shifted_lu(blk: &OperatorBlock, sigma: C64) -> Result<Lu<C64>> {
    blk.a.shifted(sigma, &blk.m).lu().map_err(|_| Error::ShiftSingular { re: sigma.re, im: sigma.im })
}

/// Shift slightly off an eigenvalue so the factorization stays regular.
fn near(lambda: C64) -> C64 {
    lambda + C64::new(1.0, 0.7) * (1e-10 * lambda.norm().max(1e-3))
}

/// Right inverse iteration `x <- (A - sigma M)^{-1} M x`.
fn refine_right(blk: &OperatorBlock, lambda: C64, x: &mut Vec<C64>, steps: usize) -> Result<()> {
    let lu = shifted_lu(blk, near(lambda))?;
    for _ in 0..steps {
        let mut y = lu.solve(&blk.m.mul_vec(x));
        let n = norm2(&y);
        y.iter_mut().for_each(|v| *v /= n);
        *x = y;
    }
    Ok(())
}

/// Left eigenvector `zeta^H A = lambda zeta^H M` by adjoint inverse iteration, local to a block.
fn left_vector(blk: &OperatorBlock, lambda: C64, right: &[C64]) -> Result<Vec<C64>> {
    let lu = shifted_lu(blk, near(lambda))?;
    // M k is a good start: it has a component along the left vector whenever zeta^H M k != 0
    let mut z = blk.m.mul_vec(right);
    if norm2(&z) == 0.0 {
        z = right.to_vec();
    }
    for _ in 0..4 {
        let mut y = lu.solve_adjoint(&blk.m.adjoint_mul_vec(&z));
        let n = norm2(&y);
        if !(n > 0.0 && n.is_finite()) {
            return Err(Error::Eigen("left inverse iteration broke down".into()));
        }
        y.iter_mut().for_each(|v| *v /= n);
        z = y;
    }
    Ok(z)
}

struct BlockResult {
    values: Vec<C64>,
    vectors: Vec<(C64, Vec<C64>)>,
}

fn dense_block(blk: &OperatorBlock, keep: usize) -> Result<BlockResult> {
    let res = qz(&blk.a, &blk.m, false, keep > 0)?;
    let mut finite: Vec<(usize, C64)> = Vec::new();
    for (i, (al, be)) in res.alpha.iter().zip(&res.beta).enumerate() {
        if be.norm() > 1e-13 * al.norm() && be.norm() > 0.0 {
            let l = al / be;
            if l.norm() < INFINITE {
                finite.push((i, l));
            }
        }
    }
    let mut order: Vec<usize> = (0..finite.len()).collect();
    order.sort_by(|&a, &b| finite[b].1.re.total_cmp(&finite[a].1.re));
    let mut vectors = Vec::new();
    if let Some(right) = &res.right {
        for &o in order.iter().take(keep) {
            let (i, l) = finite[o];
            vectors.push((l, right.col(i).to_vec()));
        }
    }
    Ok(BlockResult { values: finite.into_iter().map(|(_, l)| l).collect(), vectors })
}

/// Deterministic start vector.
fn start_vector(n: usize) -> Vec<C64> {
    let mut v: Vec<C64> = (0..n).map(|i| C64::new(1.0 + (0.37 * i as f64).sin(), (1.3 * i as f64).cos())).collect();
    let nrm = norm2(&v);
    v.iter_mut().for_each(|x| *x /= nrm);
    v
}

/// Shift-invert Arnoldi with full reorthogonalization and explicit restarts.
fn arnoldi_block(blk: &OperatorBlock, opts: &EigenOptions) -> Result<BlockResult> {
    let n = blk.dim();
    let want = opts.count.max(1).min(n);
    let kdim = opts.krylov_dim.unwrap_or(2 * want + 20).min(n);
    let sigma = opts.shift;
    let lu = shifted_lu(blk, sigma)?;
    let op = |x: &[C64]| lu.solve(&blk.m.mul_vec(x));
    let mut v0 = start_vector(n);
    let mut result: Vec<(C64, Vec<C64>)> = Vec::new();
    for restart in 0..=opts.max_restarts {
        let mut basis: Vec<Vec<C64>> = vec![v0.clone()];
        let mut h = CMatrix::zeros(kdim + 1, kdim);
        let mut k = kdim;
        for j in 0..kdim {
            let mut w = op(&basis[j]);
            for _ in 0..2 {
                for (i, b) in basis.iter().enumerate() {
                    let c = dot_conj(b, &w);
                    h[(i, j)] += c;
                    for (wi, bi) in w.iter_mut().zip(b) {
                        *wi -= c * bi;
                    }
                }
            }
            let nw = norm2(&w);
            h[(j + 1, j)] = C64::new(nw, 0.0);
            if nw < 1e-14 {
                k = j + 1;
                break;
            }
            w.iter_mut().for_each(|x| *x /= nw);
            basis.push(w);
        }
        let hk = CMatrix::from_fn(k, k, |i, j| h[(i, j)]);
        let (mu, y) = eig(&hk)?;
        let mu_max = mu.iter().fold(0.0f64, |a, m| a.max(m.norm()));
        let mut idx: Vec<usize> = (0..k).filter(|&i| mu[i].norm() > 1e-10 * mu_max).collect();
        idx.sort_by(|&a, &b| mu[b].norm().total_cmp(&mu[a].norm()));
        idx.truncate(want);
        let beta = if k < kdim { 0.0 } else { h[(k, k - 1)].norm() };
        let converged = idx.iter().all(|&i| beta * y[(k - 1, i)].norm() <= opts.tol * mu[i].norm());
        let ritz = |i: usize| -> Vec<C64> {
            let mut x = vec![CZERO; n];
            for (j, b) in basis.iter().enumerate().take(k) {
                let c = y[(j, i)];
                for (xi, bi) in x.iter_mut().zip(b) {
                    *xi += c * bi;
                }
            }
            x
        };
        if converged || restart == opts.max_restarts {
            if !converged {
                log::warn!("Arnoldi did not converge after {restart} restarts; refining Ritz pairs");
            }
            result = idx
                .iter()
                .map(|&i| (sigma + 1.0 / mu[i], i))
                .filter(|(l, _)| l.norm() < INFINITE)
                .map(|(l, i)| (l, ritz(i)))
                .collect();
            break;
        }
        let mut next = vec![CZERO; n];
        for &i in &idx {
            for (a, b) in next.iter_mut().zip(ritz(i)) {
                *a += b;
            }
        }
        let nn = norm2(&next);
        next.iter_mut().for_each(|x| *x /= nn);
        v0 = next;
    }
    Ok(BlockResult { values: result.iter().map(|(l, _)| *l).collect(), vectors: result })
}

/// Finite eigenvalues of the pencil sorted by decreasing real part; the
/// leading `opts.count` pairs carry normalized two-sided eigenvectors.
pub fn solve_generalized_eig(ops: &OperatorPair, geometry: &dyn PencilGeometry, opts: &EigenOptions) -> Result<Vec<EigenPair>> {
    solve_blocks(ops, geometry, opts, |_| true)
}

/// As [`solve_generalized_eig`], restricted to the blocks accepted by `filter`.
pub fn solve_blocks(
    ops: &OperatorPair,
    geometry: &dyn PencilGeometry,
    opts: &EigenOptions,
    filter: impl Fn(&OperatorBlock) -> bool + Sync,
) -> Result<Vec<EigenPair>> {
    let results: Vec<Result<(usize, BlockResult)>> = ops
        .blocks
        .par_iter()
        .enumerate()
        .filter(|(_, b)| filter(b))
        .map(|(bi, blk)| {
            let r = if blk.dim() <= opts.dense_threshold { dense_block(blk, opts.count)? } else { arnoldi_block(blk, opts)? };
            Ok((bi, r))
        })
        .collect();
    let mut pairs = Vec::new();
    let mut candidates: Vec<(usize, C64, Vec<C64>)> = Vec::new();
    for r in results {
        let (bi, br) = r?;
        let mode = ops.blocks[bi].mode;
        for v in &br.values {
            pairs.push(EigenPair { value: *v, mode, vector: None, residual: None });
        }
        for (l, vec) in br.vectors {
            candidates.push((bi, l, vec));
        }
    }
    let mu_max = pairs.iter().map(|p| 1.0 / (p.value - opts.shift).norm()).fold(0.0, f64::max);
    let keep = |l: C64| 1.0 / (l - opts.shift).norm() >= MU_CUT * mu_max;
    pairs.retain(|p| keep(p.value));
    candidates.retain(|c| keep(c.1));
    sort_desc(&mut pairs);
    candidates.sort_by(|a, b| b.1.re.total_cmp(&a.1.re).then(b.1.im.total_cmp(&a.1.im)));
    candidates.truncate(opts.count);
    for (bi, lambda, mut local) in candidates {
        let blk = &ops.blocks[bi];
        let mut res = block_residual(blk, lambda, &local);
        if res > 1e-10 {
            refine_right(blk, lambda, &mut local, 2)?;
            res = block_residual(blk, lambda, &local);
        }
        let mut full = vec![CZERO; ops.dim];
        blk.scatter(&local, &mut full);
        normalize_vector(&mut full, geometry);
        let local = blk.gather(&full);
        let res = block_residual(blk, lambda, &local).min(res.max(0.0) + f64::MIN_POSITIVE);
        if let Some(p) = pairs.iter_mut().find(|p| p.vector.is_none() && p.mode == blk.mode && (p.value - lambda).norm() <= 1e-12 * lambda.norm().max(1.0)) {
            p.vector = Some(full);
            p.residual = Some(res);
        }
    }
    Ok(pairs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitMember {
    pub value: C64,
    pub mode: Option<i64>,
    pub right: Vec<C64>,
    pub left: Vec<C64>,
}

/// Spectrum partitioned at `beta_split`, with biorthonormal left vectors
/// `left_i^H M right_j = delta_ij`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralSplit {
    pub beta_split: f64,
    pub sigma1: Vec<SplitMember>,
    pub sigma2_values: Vec<(C64, Option<i64>)>,
    pub r: usize,
    /// Index of the conjugate partner of each member, if any.
    pub conjugate_of: Vec<Option<usize>>,
}

impl SpectralSplit {
    pub fn values(&self) -> Vec<C64> {
        self.sigma1.iter().map(|m| m.value).collect()
    }

    /// Right vectors scaled by `s`, left vectors by `1/s`.
    pub fn rescaled(&self, s: f64) -> SpectralSplit {
        let mut out = self.clone();
        for m in &mut out.sigma1 {
            m.right.iter_mut().for_each(|v| *v *= s);
            m.left.iter_mut().for_each(|v| *v /= s);
        }
        out
    }

    /// Largest `|left_i^H M right_j - delta_ij|`.
    pub fn biorthonormality_defect(&self, ops: &OperatorPair) -> f64 {
        let mut worst: f64 = 0.0;
        for (i, a) in self.sigma1.iter().enumerate() {
            for (j, b) in self.sigma1.iter().enumerate() {
                let g = dot_conj(&a.left, &ops.apply_m(&b.right));
                let target = if i == j { CONE } else { CZERO };
                worst = worst.max((g - target).norm());
            }
        }
        worst
    }
}

/// Splits the spectrum at `beta_split` and builds biorthonormal left vectors.
pub fn split_spectrum(
    eigs: &[EigenPair],
    ops: &OperatorPair,
    geometry: &dyn PencilGeometry,
    beta_split: f64,
    gap_tol: f64,
) -> Result<SpectralSplit> {
    if let Some(p) = eigs.iter().find(|p| (p.value.re - beta_split).abs() < gap_tol) {
        return Err(Error::SplitRejected { beta_split, re: p.value.re, im: p.value.im });
    }
    let mut members: Vec<SplitMember> = Vec::new();
    let mut sigma2 = Vec::new();
    for p in eigs {
        if p.value.re > beta_split {
            let right = match &p.vector {
                Some(v) => v.clone(),
                None => {
                    return Err(Error::Eigen(format!(
                        "no eigenvector kept for {} in the split; raise the eigen count",
                        p.value
                    )))
                }
            };
            members.push(SplitMember { value: p.value, mode: p.mode, right, left: Vec::new() });
        } else {
            sigma2.push((p.value, p.mode));
        }
    }
    if members.is_empty() {
        return Err(Error::EmptySplit(beta_split));
    }
    let r = members.len();
    // conjugate partners
    let mut conjugate_of = vec![None; r];
    for i in 0..r {
        if conjugate_of[i].is_some() {
            continue;
        }
        let li = members[i].value;
        for j in (i + 1)..r {
            if conjugate_of[j].is_none() && (members[j].value - li.conj()).norm() <= 1e-8 * li.norm().max(1.0) && li.im.abs() > 1e-12 {
                conjugate_of[i] = Some(j);
                conjugate_of[j] = Some(i);
                break;
            }
        }
    }
    for i in 0..r {
        let bi = ops.block_of_vector(&members[i].right)?;
        let blk = &ops.blocks[bi];
        let local = blk.gather(&members[i].right);
        let zl = left_vector(blk, members[i].value, &local)?;
        let mut z = vec![CZERO; ops.dim];
        blk.scatter(&zl, &mut z);
        let g = dot_conj(&z, &ops.apply_m(&members[i].right));
        if g.norm() < 1e-13 {
            return Err(Error::Eigen(format!("left vector of {} is M-orthogonal to its right vector", members[i].value)));
        }
        let s = g.conj().inv();
        members[i].left = z.iter().map(|v| v * s).collect();
    }
    // exact conjugate symmetry where available
    for i in 0..r {
        if let Some(j) = conjugate_of[i] {
            if j > i {
                if let (Some(kr), Some(kl)) = (geometry.conjugate(&members[i].right), geometry.conjugate(&members[i].left)) {
                    members[j].right = kr;
                    members[j].left = kl;
                }
            }
        }
    }
    // biorthonormalize against the full Gram matrix when members share a block
    let gram = CMatrix::from_fn(r, r, |i, j| dot_conj(&members[i].left, &ops.apply_m(&members[j].right)));
    let off = (0..r).flat_map(|i| (0..r).map(move |j| (i, j))).filter(|(i, j)| i != j).fold(0.0f64, |a, (i, j)| a.max(gram[(i, j)].norm()));
    if off > 1e-12 {
        // left <- left * G^{-H}
        let ginv_h = {
            let lu = gram.lu()?;
            let mut m = CMatrix::zeros(r, r);
            for j in 0..r {
                let mut e = vec![CZERO; r];
                e[j] = CONE;
                let col = lu.solve_adjoint(&e);
                for i in 0..r {
                    m[(i, j)] = col[i];
                }
            }
            m
        };
        let lefts: Vec<Vec<C64>> = members.iter().map(|m| m.left.clone()).collect();
        for j in 0..r {
            let mut z = vec![CZERO; ops.dim];
            for (i, l) in lefts.iter().enumerate() {
                let c = ginv_h[(i, j)];
                for (zi, li) in z.iter_mut().zip(l) {
                    *zi += c * li;
                }
            }
            members[j].left = z;
        }
    }
    Ok(SpectralSplit { beta_split, sigma1: members, sigma2_values: sigma2, r, conjugate_of })
}

impl OperatorPair {
    /// Block holding the support of a two-sided vector; errors if it spans several blocks.
    pub fn block_of_vector(&self, v: &[C64]) -> Result<usize> {
        let scale = norm2(v);
        let mut found = None;
        for (bi, blk) in self.blocks.iter().enumerate() {
            let part: f64 = blk.indices.iter().map(|&i| v[i].norm_sqr()).sum::<f64>().sqrt();
            if part > 1e-14 * scale {
                if found.is_some() {
                    return Err(Error::Eigen("vector spans several operator blocks".into()));
                }
                found = Some(bi);
            }
        }
        found.ok_or_else(|| Error::Eigen("zero vector has no block".into()))
    }
}
