//! Newton iteration and pseudo-arclength continuation for real steady problems `F(x, p) = 0`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::Observables;
use crate::linalg::{norm_inf, Lu, RMatrix};

/// A square real system with one scalar parameter.
pub trait SteadyProblem {
    fn dim(&self) -> usize;

    fn residual(&self, x: &[f64], p: f64) -> Result<Vec<f64>>;

    fn residual_and_jacobian(&self, x: &[f64], p: f64) -> Result<(Vec<f64>, RMatrix)>;

    /// `dF/dp`, by central differences unless overridden.
    fn param_derivative(&self, x: &[f64], p: f64) -> Result<Vec<f64>> {
        let h = 1e-6 * p.abs().max(1.0);
        let fp = self.residual(x, p + h)?;
        let fm = self.residual(x, p - h)?;
        Ok(fp.iter().zip(&fm).map(|(a, b)| (a - b) / (2.0 * h)).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NewtonOptions {
    /// Tolerance on the infinity norm of the residual.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        NewtonOptions { tol: 1e-10, max_iter: 25 }
    }
}

#[derive(Debug, Clone)]
pub struct NewtonReport {
    pub x: Vec<f64>,
    /// Newton updates performed (0 when the guess already satisfies the tolerance).
    pub iterations: usize,
    pub residual: f64,
}

pub fn newton_solve<P: SteadyProblem + ?Sized>(problem: &P, x0: &[f64], p: f64, opts: &NewtonOptions) -> Result<NewtonReport> {
    if x0.len() != problem.dim() {
        return Err(Error::Dimension(format!("guess has length {}, problem has {}", x0.len(), problem.dim())));
    }
    let mut x = x0.to_vec();
    let mut iterations = 0;
    loop {
        let (r, j) = if iterations < opts.max_iter {
            problem.residual_and_jacobian(&x, p)?
        } else {
            (problem.residual(&x, p)?, RMatrix::zeros(0, 0))
        };
        let res = norm_inf(&r);
        log::debug!("newton iteration {iterations}: residual {res:e}");
        if res < opts.tol {
            return Ok(NewtonReport { x, iterations, residual: res });
        }
        if !res.is_finite() || iterations >= opts.max_iter {
            return Err(Error::NoConvergence { iterations, residual: res });
        }
        let dx = j.lu()?.solve(&r);
        for (xi, d) in x.iter_mut().zip(&dx) {
            *xi -= d;
        }
        iterations += 1;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContinuationOptions {
    pub step0: f64,
    /// Defaults to `1e-4 * step0` when `None`.
    pub step_min: Option<f64>,
    /// Defaults to `10 * step0` when `None`.
    pub step_max: Option<f64>,
    /// Weight of the parameter in the arclength norm.
    pub w_p: f64,
    pub newton: NewtonOptions,
    /// Corrector iterations before a step counts as failed.
    pub corrector_max_iter: usize,
    pub max_points: usize,
    /// Relative accuracy of fold localization in the parameter.
    pub fold_tol: f64,
}

impl Default for ContinuationOptions {
    fn default() -> Self {
        ContinuationOptions {
            step0: 10.0,
            step_min: None,
            step_max: None,
            w_p: 1.0,
            newton: NewtonOptions::default(),
            corrector_max_iter: 8,
            max_points: 500,
            fold_tol: 1e-3,
        }
    }
}

impl ContinuationOptions {
    fn step_min(&self) -> f64 {
        self.step_min.unwrap_or(1e-4 * self.step0)
    }

    fn step_max(&self) -> f64 {
        self.step_max.unwrap_or(10.0 * self.step0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchPoint {
    /// Unknowns of the steady problem (packed real state for flows).
    pub x: Vec<f64>,
    pub param: f64,
    /// Parameter component of the unit tangent.
    pub tangent_param: f64,
    pub iterations: usize,
    pub residual: f64,
    /// Number of eigenvalues with positive real part, when computed.
    #[serde(default)]
    pub stability: Option<usize>,
    #[serde(default)]
    pub observables: Option<Observables>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fold {
    pub param: f64,
    pub x: Vec<f64>,
    /// The fold lies between `points[after]` and `points[after + 1]`.
    pub after: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub points: Vec<BranchPoint>,
    /// Accepted arclength steps; `steps[i]` separates points `i` and `i + 1`.
    pub steps: Vec<f64>,
    pub folds: Vec<Fold>,
}

struct Bordered<'a, P: ?Sized> {
    problem: &'a P,
    w_p: f64,
}

impl<P: SteadyProblem + ?Sized> Bordered<'_, P> {
    fn jacobian(&self, x: &[f64], p: f64, tx: &[f64], tp: f64) -> Result<(Vec<f64>, RMatrix)> {
        let n = x.len();
        let (r, j) = self.problem.residual_and_jacobian(x, p)?;
        let fp = self.problem.param_derivative(x, p)?;
        let mut b = RMatrix::zeros(n + 1, n + 1);
        for c in 0..n {
            b.col_mut(c)[..n].copy_from_slice(j.col(c));
            b[(n, c)] = tx[c];
        }
        b.col_mut(n)[..n].copy_from_slice(&fp);
        b[(n, n)] = self.w_p * tp;
        Ok((r, b))
    }

    /// Unit tangent oriented to have positive inner product with `(tx, tp)`.
    fn tangent(&self, x: &[f64], p: f64, tx: &[f64], tp: f64) -> Result<(Vec<f64>, f64)> {
        let n = x.len();
        let (_, b) = self.jacobian(x, p, tx, tp)?;
        let mut rhs = vec![0.0; n + 1];
        rhs[n] = 1.0;
        let t = b.lu()?.solve(&rhs);
        self.normalize(&t[..n], t[n], tx, tp)
    }

    fn normalize(&self, tx: &[f64], tp: f64, ref_x: &[f64], ref_p: f64) -> Result<(Vec<f64>, f64)> {
        let nrm = (tx.iter().map(|v| v * v).sum::<f64>() + self.w_p * tp * tp).sqrt();
        if !(nrm > 0.0 && nrm.is_finite()) {
            return Err(Error::Factorization("degenerate tangent".into()));
        }
        let dot: f64 = tx.iter().zip(ref_x).map(|(a, b)| a * b).sum::<f64>() + self.w_p * tp * ref_p;
        let s = if dot < 0.0 { -1.0 / nrm } else { 1.0 / nrm };
        Ok((tx.iter().map(|v| v * s).collect(), tp * s))
    }

    /// Newton on `F = 0` intersected with the hyperplane through `(xp, pp)` normal to `(tx, tp)`.
    ///
    /// The tangent at the corrected point reuses the factorization of the last
    /// Newton step: the bordered matrix is the tangent system, and the iterate
    /// it was assembled at differs from the converged point by the final update.
    fn correct(&self, xp: &[f64], pp: f64, tx: &[f64], tp: f64, opts: &ContinuationOptions) -> Result<Corrected> {
        let n = xp.len();
        let mut x = xp.to_vec();
        let mut p = pp;
        let mut last = f64::INFINITY;
        let mut prev: Option<Lu<f64>> = None;
        for it in 0..=opts.corrector_max_iter {
            let (r, b) = self.jacobian(&x, p, tx, tp)?;
            let res = norm_inf(&r);
            let plane: f64 = tx.iter().zip(&x).zip(xp).map(|((t, a), b)| t * (a - b)).sum::<f64>() + self.w_p * tp * (p - pp);
            if res < opts.newton.tol && plane.abs() < 1e-10 * (1.0 + p.abs()) {
                let lu = match prev {
                    Some(lu) => lu,
                    None => b.lu()?,
                };
                let mut e = vec![0.0; n + 1];
                e[n] = 1.0;
                let t = lu.solve(&e);
                let tangent = self.normalize(&t[..n], t[n], tx, tp)?;
                return Ok(Corrected { x, p, iterations: it, residual: res, tangent });
            }
            if !res.is_finite() || (it >= 2 && res > 2.0 * last) || it == opts.corrector_max_iter {
                return Err(Error::NoConvergence { iterations: it, residual: res });
            }
            last = res;
            let mut rhs = r;
            rhs.push(plane);
            let lu = b.lu()?;
            let d = lu.solve(&rhs);
            prev = Some(lu);
            for (xi, di) in x.iter_mut().zip(&d[..n]) {
                *xi -= di;
            }
            p -= d[n];
        }
        unreachable!()
    }
}

struct Corrected {
    x: Vec<f64>,
    p: f64,
    iterations: usize,
    residual: f64,
    tangent: (Vec<f64>, f64),
}

/// Solves `F(x, p) = 0` on the hyperplane through `(x0, p0)` normal to `(tx, tp)`
/// (weighted by `opts.w_p`), with both `x` and `p` free. Used to land on a
/// branch near a bifurcation point, where fixed-parameter Newton is singular.
pub fn solve_on_plane<P: SteadyProblem + ?Sized>(
    problem: &P,
    x0: &[f64],
    p0: f64,
    tx: &[f64],
    tp: f64,
    opts: &ContinuationOptions,
) -> Result<BranchPoint> {
    if x0.len() != problem.dim() || tx.len() != problem.dim() {
        return Err(Error::Dimension(format!("plane data does not match problem dimension {}", problem.dim())));
    }
    let n = x0.len();
    let bordered = Bordered { problem, w_p: opts.w_p };
    let mut x = x0.to_vec();
    let mut p = p0;
    // no monotonicity guard: the bordered matrix is nearly singular this close
    // to the bifurcation and the first iterates may overshoot
    for it in 0..=opts.newton.max_iter {
        let (r, b) = bordered.jacobian(&x, p, tx, tp)?;
        let res = norm_inf(&r);
        log::debug!("plane newton iteration {it}: residual {res:e} param {p}");
        let plane: f64 = tx.iter().zip(&x).zip(x0).map(|((t, a), b)| t * (a - b)).sum::<f64>() + opts.w_p * tp * (p - p0);
        if res < opts.newton.tol && plane.abs() < 1e-10 * (1.0 + p.abs()) {
            let (_, tangent_param) = bordered.tangent(&x, p, tx, tp)?;
            return Ok(BranchPoint { x, param: p, tangent_param, iterations: it, residual: res, stability: None, observables: None });
        }
        if !res.is_finite() || it == opts.newton.max_iter {
            return Err(Error::NoConvergence { iterations: it, residual: res });
        }
        let mut rhs = r;
        rhs.push(plane);
        let d = b.lu()?.solve(&rhs);
        for (xi, di) in x.iter_mut().zip(&d[..n]) {
            *xi -= di;
        }
        p -= d[n];
    }
    unreachable!()
}

/// Traces a branch from a converged point.
///
/// `direction` selects the initial sense of the parameter (+1 increasing).
/// The run ends when the parameter leaves `param_range`, after
/// `opts.max_points` points, or with [`Error::BranchStall`] when the step
/// underflows.
pub fn continue_branch<P: SteadyProblem + ?Sized>(
    problem: &P,
    start_x: &[f64],
    start_param: f64,
    direction: f64,
    param_range: (f64, f64),
    opts: &ContinuationOptions,
) -> Result<Branch> {
    let n = problem.dim();
    if start_x.len() != n {
        return Err(Error::Dimension(format!("start has length {}, problem has {}", start_x.len(), n)));
    }
    let (lo, hi) = (param_range.0.min(param_range.1), param_range.0.max(param_range.1));
    let bordered = Bordered { problem, w_p: opts.w_p };
    let start = newton_solve(problem, start_x, start_param, &opts.newton)?;

    // initial tangent: J t_x = -F_p, t_p = direction
    let (_, j) = problem.residual_and_jacobian(&start.x, start_param)?;
    let fp = problem.param_derivative(&start.x, start_param)?;
    let dir = if direction < 0.0 { -1.0 } else { 1.0 };
    let tx0: Vec<f64> = j.lu()?.solve(&fp).iter().map(|v| -v * dir).collect();
    let (mut tx, mut tp) = bordered.normalize(&tx0, dir, &tx0, dir)?;

    let mut branch = Branch::default();
    branch.points.push(BranchPoint {
        x: start.x.clone(),
        param: start_param,
        tangent_param: tp,
        iterations: start.iterations,
        residual: start.residual,
        stability: None,
        observables: None,
    });
    let mut x = start.x;
    let mut p = start_param;
    let mut h = opts.step0;
    let (h_min, h_max) = (opts.step_min(), opts.step_max());

    while branch.points.len() < opts.max_points {
        let xp: Vec<f64> = x.iter().zip(&tx).map(|(a, t)| a + h * t).collect();
        let pp = p + h * tp;
        match bordered.correct(&xp, pp, &tx, tp, opts) {
            Ok(Corrected { x: xn, p: pn, iterations: iters, residual: res, tangent: (txn, tpn) }) => {
                // independent re-check of the accepted point
                let check = norm_inf(&problem.residual(&xn, pn)?);
                if check >= opts.newton.tol {
                    return Err(Error::NoConvergence { iterations: iters, residual: check });
                }
                if pn < lo || pn > hi {
                    log::info!("parameter left [{lo}, {hi}] at {pn}");
                    break;
                }
                if tpn.signum() != tp.signum() && tp != 0.0 {
                    let fold = locate_fold(&bordered, &x, p, &tx, tp, h, opts)?;
                    log::info!("fold near parameter {}", fold.1);
                    branch.folds.push(Fold { param: fold.1, x: fold.0, after: branch.points.len() - 1 });
                }
                branch.points.push(BranchPoint {
                    x: xn.clone(),
                    param: pn,
                    tangent_param: tpn,
                    iterations: iters,
                    residual: res,
                    stability: None,
                    observables: None,
                });
                branch.steps.push(h);
                log::debug!("accepted point param {pn} step {h} iterations {iters}");
                x = xn;
                p = pn;
                tx = txn;
                tp = tpn;
                if iters <= 3 {
                    h = (h * 1.3).min(h_max);
                }
            }
            Err(e @ (Error::NoConvergence { .. } | Error::Factorization(_))) => {
                h *= 0.5;
                log::debug!("corrector failed ({e}); step reduced to {h}");
                if h < h_min {
                    return Err(Error::BranchStall { step: h, branch: Box::new(branch) });
                }
            }
            Err(e) => return Err(e),
        }
    }
    Ok(branch)
}

/// Bisection in arclength for the zero of the tangent's parameter component.
fn locate_fold<P: SteadyProblem + ?Sized>(
    bordered: &Bordered<'_, P>,
    x0: &[f64],
    p0: f64,
    tx: &[f64],
    tp: f64,
    h: f64,
    opts: &ContinuationOptions,
) -> Result<(Vec<f64>, f64)> {
    let point_at = |s: f64| -> Result<(Vec<f64>, f64, f64)> {
        let xp: Vec<f64> = x0.iter().zip(tx).map(|(a, t)| a + s * t).collect();
        let c = bordered.correct(&xp, p0 + s * tp, tx, tp, opts)?;
        Ok((c.x, c.p, c.tangent.1))
    };
    let (mut s_lo, mut t_lo, mut p_lo) = (0.0, tp, p0);
    let (xh, ph, th) = point_at(h)?;
    let (mut s_hi, mut t_hi) = (h, th);
    let mut best = (xh, ph);
    // |p - p_fold| inside the bracket is bounded by its width times the largest |dp/ds|
    let spread = |s_lo: f64, s_hi: f64, t_lo: f64, t_hi: f64| (s_hi - s_lo) * t_lo.abs().max(t_hi.abs());
    for _ in 0..60 {
        if spread(s_lo, s_hi, t_lo, t_hi) <= opts.fold_tol * p_lo.abs().max(1.0) {
            break;
        }
        let s = 0.5 * (s_lo + s_hi);
        let (xm, pm, tm) = point_at(s)?;
        if tm.signum() == t_lo.signum() {
            s_lo = s;
            t_lo = tm;
            p_lo = pm;
        } else {
            s_hi = s;
            t_hi = tm;
        }
        best = (xm, pm);
    }
    // linear interpolation of the tangent component inside the final bracket
    let s_star = s_lo + (s_hi - s_lo) * t_lo / (t_lo - t_hi);
    match point_at(s_star) {
        Ok((x, p, _)) => Ok((x, p)),
        Err(_) => Ok(best),
    }
}
