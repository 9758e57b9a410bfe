//! Travelling waves emanating from a Hopf point of the laminar state: the
//! critical parameter, the first point of the branch, and perturbation
//! diagnostics along it.

use crate::continuation::{newton_solve, solve_on_plane, Branch, BranchPoint, ContinuationOptions, NewtonOptions};
use crate::eigen::{solve_generalized_eig, EigenOptions, EigenPair};
use crate::error::{Error, Result};
use crate::flow::{ContinuationParam, FlowModel, ModelParams, Observables, PhaseCondition, StateVector, SteadyFlow};
use crate::linalg::C64;

/// Spectrum of the laminar linearization, sorted by decreasing real part.
pub fn laminar_spectrum(model: &FlowModel, params: &ModelParams, opts: &EigenOptions) -> Result<Vec<EigenPair>> {
    let lam = model.laminar_state(params)?;
    let ops = model.assemble_linearization(params, &lam, PhaseCondition::Inactive)?;
    solve_generalized_eig(&ops, model, opts)
}

/// Leading laminar eigenpair restricted to Fourier modes `+-1`.
pub fn leading_wave_pair(model: &FlowModel, params: &ModelParams, opts: &EigenOptions) -> Result<EigenPair> {
    laminar_spectrum(model, params, opts)?
        .into_iter()
        .find(|p| matches!(p.mode, Some(1) | Some(-1)))
        .ok_or_else(|| Error::Eigen("no eigenvalue found in Fourier modes +-1".into()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CriticalPoint {
    pub param: f64,
    pub eigenvalue: C64,
    pub mode: i64,
    pub evaluations: usize,
}

/// Parameter value where the leading `+-1` laminar eigenvalue crosses the
/// imaginary axis inside `bracket`, by Illinois regula falsi.
///
/// The laminar linearization decouples across Fourier modes, so a grid with
/// `n1 = 1` gives the same answer as a finer one at a fraction of the cost.
pub fn critical_parameter(
    model: &FlowModel,
    params: &ModelParams,
    which: ContinuationParam,
    bracket: (f64, f64),
    tol: f64,
    opts: &EigenOptions,
) -> Result<CriticalPoint> {
    let mut evaluations = 0;
    let mut eval = |p: f64| -> Result<EigenPair> {
        evaluations += 1;
        let e = leading_wave_pair(model, &params.with(which, p), opts)?;
        log::debug!("critical search: {which:?} = {p}, leading {}", e.value);
        Ok(e)
    };
    let (mut a, mut b) = bracket;
    let mut fa = eval(a)?.value.re;
    let mut fb = eval(b)?.value.re;
    if fa * fb > 0.0 {
        return Err(Error::InvalidParameter(format!(
            "leading growth rate does not change sign on [{a}, {b}] ({fa:e}, {fb:e})"
        )));
    }
    let mut best = if fa.abs() < fb.abs() { a } else { b };
    while (b - a).abs() > tol && fb != 0.0 {
        let c = (a * fb - b * fa) / (fb - fa);
        let fc = eval(c)?.value.re;
        best = c;
        if fc * fb < 0.0 {
            a = b;
            fa = fb;
        } else {
            fa *= 0.5;
        }
        b = c;
        fb = fc;
        if fc.abs() < 1e-13 {
            break;
        }
    }
    let e = eval(best)?;
    Ok(CriticalPoint { param: best, eigenvalue: e.value, mode: e.mode.unwrap_or(1), evaluations })
}

/// First travelling-wave point near a Hopf point at `params`.
///
/// The critical eigendirection `v` (real, phase fixed) defines the plane
/// through `laminar + amplitude v` orthogonal to `v`; the steady problem with
/// free parameter is solved on that plane.
pub fn branch_start(
    model: &FlowModel,
    params: &ModelParams,
    which: ContinuationParam,
    amplitude: f64,
    eig_opts: &EigenOptions,
    opts: &ContinuationOptions,
) -> Result<BranchPoint> {
    let g = &model.grid;
    let pair = leading_wave_pair(model, params, eig_opts)?;
    let vector = pair.vector.as_ref().ok_or_else(|| Error::Eigen("critical eigenvector was not kept".into()))?;
    let (dir, c) = model.bifurcation_direction(pair.value, pair.mode.unwrap_or(1), vector)?;
    let lam = model.laminar_state(params)?;
    let tx = dir.pack_real(g);
    let mut x0: Vec<f64> = lam.pack_real(g).iter().zip(&tx).map(|(a, t)| a + amplitude * t).collect();
    *x0.last_mut().expect("nonempty state") = c;
    let problem = SteadyFlow::new(model, *params, which, PhaseCondition::Active);
    solve_on_plane(&problem, &x0, params.get(which), &tx, 0.0, opts)
}

/// `state - laminar(params)` with the phase speed and forcing removed.
pub fn perturbation(model: &FlowModel, params: &ModelParams, state: &StateVector) -> Result<StateVector> {
    let lam = model.laminar_state(params)?;
    let mut d = state.add_scaled(-1.0, &lam);
    d.c = 0.0;
    d.f = 0.0;
    Ok(d)
}

/// Observables of a steady state measured relative to the laminar state.
pub fn perturbation_observables(model: &FlowModel, params: &ModelParams, state: &StateVector) -> Result<Observables> {
    let lam = model.laminar_state(params)?;
    let mut d = state.add_scaled(-1.0, &lam);
    d.c = 0.0;
    d.f = 0.0;
    model.observables(params, &d, Some(&lam))
}

/// Fills the observables of every branch point.
pub fn annotate_branch(model: &FlowModel, params: &ModelParams, which: ContinuationParam, branch: &mut Branch) -> Result<()> {
    for p in &mut branch.points {
        let at = params.with(which, p.param);
        let s = StateVector::unpack_real(&model.grid, &p.x)?;
        p.observables = Some(perturbation_observables(model, &at, &s)?);
    }
    Ok(())
}

/// Travelling wave at parameter `value` on the first branch segment that
/// crosses it, refined by Newton at fixed parameter.
pub fn state_on_branch(
    model: &FlowModel,
    params: &ModelParams,
    which: ContinuationParam,
    branch: &Branch,
    value: f64,
    newton: &NewtonOptions,
) -> Result<StateVector> {
    let pts = &branch.points;
    let i = (0..pts.len().saturating_sub(1))
        .find(|&i| (pts[i].param - value) * (pts[i + 1].param - value) <= 0.0)
        .ok_or_else(|| Error::InvalidParameter(format!("branch does not reach {which:?} = {value}")))?;
    let (a, b) = (&pts[i], &pts[i + 1]);
    let t = if b.param == a.param { 0.0 } else { (value - a.param) / (b.param - a.param) };
    let guess: Vec<f64> = a.x.iter().zip(&b.x).map(|(u, v)| u + t * (v - u)).collect();
    let problem = SteadyFlow::new(model, params.with(which, value), which, PhaseCondition::Active);
    let report = newton_solve(&problem, &guess, value, newton)?;
    StateVector::unpack_real(&model.grid, &report.x)
}
