//! Analysis of the reduced polynomial dynamics `theta' = R(theta)`.
//!
//! For a conjugate pair `theta = (z, conj z)` the phase-equivariant part of `R`
//! gives an autonomous polar system whose positive radial roots are invariant
//! circles; on the full space these lift to travelling waves.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{FlowModel, ModelParams, Observables, StateVector};
use crate::linalg::{eig, CMatrix, C64, CZERO};
use crate::ssm::{pair_coordinates, ExpansionTable, MultiIndex};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub t: Vec<f64>,
    pub theta: Vec<Vec<C64>>,
}

/// Recursive Horner layout: `children[a]` multiplies `theta_var^a`.
#[derive(Debug, Clone)]
enum Horner {
    Leaf(Vec<C64>),
    Node(Vec<Horner>),
}

impl Horner {
    fn build(terms: &[(&[u32], &[C64])], var: usize, r: usize) -> Horner {
        if var == r {
            let mut acc = vec![CZERO; terms.first().map_or(0, |t| t.1.len())];
            for (_, c) in terms {
                acc.iter_mut().zip(c.iter()).for_each(|(a, b)| *a += b);
            }
            return Horner::Leaf(acc);
        }
        let top = terms.iter().map(|t| t.0[var]).max().unwrap_or(0) as usize;
        let children = (0..=top)
            .map(|p| {
                let sub: Vec<_> = terms.iter().filter(|t| t.0[var] as usize == p).copied().collect();
                if sub.is_empty() {
                    Horner::Node(Vec::new())
                } else {
                    Horner::build(&sub, var + 1, r)
                }
            })
            .collect();
        Horner::Node(children)
    }

    fn eval(&self, theta: &[C64], var: usize, out: &mut Vec<C64>) {
        match self {
            Horner::Leaf(c) => out.clone_from(c),
            Horner::Node(children) => {
                out.iter_mut().for_each(|v| *v = CZERO);
                let mut tmp = vec![CZERO; out.len()];
                for child in children.iter().rev() {
                    out.iter_mut().for_each(|v| *v *= theta[var]);
                    if matches!(child, Horner::Node(c) if c.is_empty()) {
                        continue;
                    }
                    child.eval(theta, var + 1, &mut tmp);
                    out.iter_mut().zip(&tmp).for_each(|(o, t)| *o += t);
                }
            }
        }
    }
}

/// The `R` part of an expansion table.
#[derive(Debug, Clone)]
pub struct ReducedVectorField {
    pub r: usize,
    pub order: usize,
    pub coeffs: Vec<(MultiIndex, Vec<C64>)>,
    pub conjugate_of: Vec<Option<usize>>,
    horner: Horner,
}

impl ReducedVectorField {
    pub fn new(r: usize, coeffs: Vec<(MultiIndex, Vec<C64>)>, conjugate_of: Vec<Option<usize>>) -> Result<Self> {
        for (a, c) in &coeffs {
            if a.dim() != r || c.len() != r {
                return Err(Error::Dimension(format!("monomial {a} does not match reduced dimension {r}")));
            }
        }
        let order = coeffs.iter().map(|(a, _)| a.order()).max().unwrap_or(0);
        let terms: Vec<(&[u32], &[C64])> = coeffs.iter().map(|(a, c)| (a.0.as_slice(), c.as_slice())).collect();
        let horner = if terms.is_empty() { Horner::Leaf(vec![CZERO; r]) } else { Horner::build(&terms, 0, r) };
        Ok(ReducedVectorField { r, order, coeffs, conjugate_of, horner })
    }

    pub fn from_table(table: &ExpansionTable) -> Self {
        let coeffs = table
            .monomials()
            .filter(|m| m.r.iter().any(|c| *c != CZERO))
            .map(|m| (m.alpha.clone(), m.r.clone()))
            .collect();
        // dimensions come from the table itself, so this cannot fail
        Self::new(table.r, coeffs, table.first.conjugate_of.clone()).expect("consistent table")
    }

    /// `R(theta)`
    pub fn eval(&self, theta: &[C64]) -> Vec<C64> {
        let mut out = vec![CZERO; self.r];
        self.horner.eval(theta, 0, &mut out);
        if out.is_empty() {
            return vec![CZERO; self.r];
        }
        out
    }

    fn is_conjugate_pair(&self) -> bool {
        self.r == 2 && self.conjugate_of == [Some(1), Some(0)]
    }
}

pub fn eval_r(field: &ReducedVectorField, theta: &[C64]) -> Vec<C64> {
    field.eval(theta)
}

/// `r' = a1 r + a3 r^3 + ...`, `phi' = w0 + w2 r^2 + ...`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolarForm {
    pub radial: Vec<f64>,
    pub angular: Vec<f64>,
    pub equivariance_defect: f64,
}

impl PolarForm {
    /// `r'/r` as a polynomial in `s = r^2`.
    pub fn growth(&self, r: f64) -> f64 {
        horner_real(&self.radial, r * r)
    }

    pub fn radial_rate(&self, r: f64) -> f64 {
        r * self.growth(r)
    }

    pub fn frequency(&self, r: f64) -> f64 {
        horner_real(&self.angular, r * r)
    }

    /// `d(r')/dr`
    pub fn radial_slope(&self, r: f64) -> f64 {
        let s = r * r;
        let dp: f64 = self.radial.iter().enumerate().skip(1).rev().fold(0.0, |acc, (b, a)| acc * s + b as f64 * a);
        self.growth(r) + 2.0 * s * dp
    }
}

fn horner_real(c: &[f64], s: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, a| acc * s + a)
}

/// Keeps the `z^{b+1} conj(z)^b` terms of the first component.
pub fn to_polar(field: &ReducedVectorField) -> Result<PolarForm> {
    if field.r != 2 {
        return Err(Error::UnsupportedDimension(field.r));
    }
    if !field.is_conjugate_pair() {
        return Err(Error::InvalidParameter("polar form needs a conjugate coordinate pair".into()));
    }
    let nb = field.order.saturating_sub(1) / 2 + 1;
    let mut gamma = vec![CZERO; nb];
    let mut defect = 0.0f64;
    for (alpha, c) in &field.coeffs {
        let (p, q) = (alpha.0[0], alpha.0[1]);
        if p == q + 1 {
            gamma[q as usize] += c[0];
        } else {
            defect += c[0].norm_sqr();
        }
    }
    Ok(PolarForm {
        radial: gamma.iter().map(|g| g.re).collect(),
        angular: gamma.iter().map(|g| g.im).collect(),
        equivariance_defect: defect.sqrt(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stability {
    Stable,
    Unstable,
    Degenerate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InvariantCircle {
    pub radius: f64,
    pub frequency: f64,
    pub stability: Stability,
    /// Whether the radius lies inside the fundamental domain.
    pub trusted: bool,
}

/// Positive radii in `(0, r_max]` where the radial rate vanishes, ascending.
pub fn invariant_radii(polar: &PolarForm, r_max: f64) -> Result<Vec<InvariantCircle>> {
    let mut c = polar.radial.clone();
    let scale = c.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if scale == 0.0 {
        return Ok(Vec::new());
    }
    while c.last().is_some_and(|v| v.abs() <= 1e-14 * scale) {
        c.pop();
    }
    let deg = c.len() - 1;
    if deg == 0 {
        return Ok(Vec::new());
    }
    let lead = c[deg];
    let comp = CMatrix::from_fn(deg, deg, |i, j| {
        if i == 0 {
            C64::new(-c[deg - 1 - j] / lead, 0.0)
        } else if i == j + 1 {
            C64::new(1.0, 0.0)
        } else {
            CZERO
        }
    });
    let (roots, _) = eig(&comp)?;
    let p = |r: f64| horner_real(&c, r * r);
    let mut out: Vec<InvariantCircle> = Vec::new();
    for s in roots {
        if s.re <= 0.0 || s.im.abs() > 1e-6 * s.norm().max(1e-300) {
            continue;
        }
        let mut r = s.re.sqrt();
        if r > r_max * (1.0 + 1e-9) {
            continue;
        }
        // bracket the sign change, then bisect
        let mut d = 1e-6 * r;
        let (mut lo, mut hi) = (r - d, r + d);
        while p(lo).signum() == p(hi).signum() && d < 0.5 * r {
            d *= 2.0;
            lo = r - d;
            hi = r + d;
        }
        if p(lo).signum() != p(hi).signum() {
            while hi - lo > 1e-12 {
                let mid = 0.5 * (lo + hi);
                if p(mid).signum() == p(lo).signum() {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            r = 0.5 * (lo + hi);
        }
        if r > r_max || out.iter().any(|o| (o.radius - r).abs() <= 1e-10 * r) {
            continue;
        }
        let slope = polar.radial_slope(r);
        let stability = if slope.abs() <= 1e-12 * scale {
            Stability::Degenerate
        } else if slope < 0.0 {
            Stability::Stable
        } else {
            Stability::Unstable
        };
        out.push(InvariantCircle { radius: r, frequency: polar.frequency(r), stability, trusted: true });
    }
    out.sort_by(|a, b| a.radius.total_cmp(&b.radius));
    Ok(out)
}

/// Marks circles outside the fundamental domain as untrusted.
pub fn flag_untrusted(circles: &mut [InvariantCircle], domain_radius: f64) {
    for c in circles {
        c.trusted = c.radius <= domain_radius;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegrateOptions {
    pub rtol: f64,
    pub atol: f64,
    pub h0: Option<f64>,
    pub max_steps: usize,
}

impl Default for IntegrateOptions {
    fn default() -> Self {
        IntegrateOptions { rtol: 1e-9, atol: 1e-12, h0: None, max_steps: 1_000_000 }
    }
}

// Dormand-Prince 5(4) tableau
const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;
// continuous extension coefficients
const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

fn axpy(y: &[f64], terms: &[(f64, &[f64])]) -> Vec<f64> {
    let mut out = y.to_vec();
    for (a, k) in terms {
        out.iter_mut().zip(k.iter()).for_each(|(o, v)| *o += a * v);
    }
    out
}

/// Adaptive DOPRI5 on a real system; `t_out` must be sorted with `t_out[0]` the start time.
pub fn integrate_real(
    f: &dyn Fn(f64, &[f64]) -> Vec<f64>,
    y0: &[f64],
    t_out: &[f64],
    opts: &IntegrateOptions,
) -> std::result::Result<Vec<Vec<f64>>, (f64, Vec<Vec<f64>>)> {
    let n = y0.len();
    let mut samples = Vec::with_capacity(t_out.len());
    let Some(&t0) = t_out.first() else { return Ok(samples) };
    let t_end = *t_out.last().unwrap();
    samples.push(y0.to_vec());
    let mut next = 1;
    let mut t = t0;
    let mut y = y0.to_vec();
    let mut k1 = f(t, &y);
    let sc = |a: f64, b: f64| opts.atol + opts.rtol * a.abs().max(b.abs());
    let mut h = opts.h0.unwrap_or_else(|| {
        let d0 = (y.iter().map(|v| (v / sc(*v, 0.0)).powi(2)).sum::<f64>() / n.max(1) as f64).sqrt();
        let d1 = (k1.iter().zip(&y).map(|(k, v)| (k / sc(*v, 0.0)).powi(2)).sum::<f64>() / n.max(1) as f64).sqrt();
        let h = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
        h.min((t_end - t0).abs().max(1e-12))
    });
    let mut steps = 0;
    let mut fac_old = 1e-4f64;
    while next < t_out.len() {
        if steps >= opts.max_steps {
            return Err((t, samples));
        }
        steps += 1;
        if t + h > t_end {
            h = t_end - t;
        }
        let hmin = 1e-14 * t.abs().max(1.0);
        if !h.is_finite() || h < hmin && t_end - t > hmin {
            return Err((t, samples));
        }
        let k2 = f(t + C2 * h, &axpy(&y, &[(h * A21, &k1)]));
        let k3 = f(t + C3 * h, &axpy(&y, &[(h * A31, &k1), (h * A32, &k2)]));
        let k4 = f(t + C4 * h, &axpy(&y, &[(h * A41, &k1), (h * A42, &k2), (h * A43, &k3)]));
        let k5 = f(t + C5 * h, &axpy(&y, &[(h * A51, &k1), (h * A52, &k2), (h * A53, &k3), (h * A54, &k4)]));
        let k6 = f(t + h, &axpy(&y, &[(h * A61, &k1), (h * A62, &k2), (h * A63, &k3), (h * A64, &k4), (h * A65, &k5)]));
        let y1 = axpy(&y, &[(h * A71, &k1), (h * A73, &k3), (h * A74, &k4), (h * A75, &k5), (h * A76, &k6)]);
        let k7 = f(t + h, &y1);
        let mut err = 0.0;
        for i in 0..n {
            let e = h * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
            err += (e / sc(y[i], y1[i])).powi(2);
        }
        let err = (err / n.max(1) as f64).sqrt();
        if !err.is_finite() || y1.iter().any(|v| !v.is_finite()) {
            h *= 0.1;
            continue;
        }
        if err <= 1.0 {
            // Lund stabilization of the step-size controller
            let fac = (0.9 * err.max(1e-10).powf(-0.17) * fac_old.powf(0.04)).clamp(0.2, 10.0);
            fac_old = err.max(1e-4);
            let t1 = t + h;
            while next < t_out.len() && t_out[next] <= t1 + 1e-14 * t1.abs().max(1.0) {
                let th = ((t_out[next] - t) / h).clamp(0.0, 1.0);
                let th1 = 1.0 - th;
                let mut out = vec![0.0; n];
                for i in 0..n {
                    let ydiff = y1[i] - y[i];
                    let bspl = h * k1[i] - ydiff;
                    let r4 = ydiff - h * k7[i] - bspl;
                    let r5 = h * (D1 * k1[i] + D3 * k3[i] + D4 * k4[i] + D5 * k5[i] + D6 * k6[i] + D7 * k7[i]);
                    out[i] = y[i] + th * (ydiff + th1 * (bspl + th * (r4 + th1 * r5)));
                }
                samples.push(out);
                next += 1;
            }
            t = t1;
            y = y1;
            k1 = k7;
            h *= fac;
        } else {
            h *= (0.9 * err.powf(-0.2)).max(0.2);
        }
    }
    Ok(samples)
}

/// Integrates `theta' = R(theta)` and samples at `t_out`.
pub fn integrate(field: &ReducedVectorField, theta0: &[C64], t_out: &[f64], opts: &IntegrateOptions) -> Result<Trajectory> {
    if theta0.len() != field.r {
        return Err(Error::Dimension(format!("theta0 has length {}, field has dimension {}", theta0.len(), field.r)));
    }
    if t_out.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::InvalidParameter("output times must be non-decreasing".into()));
    }
    let r = field.r;
    let pack = |z: &[C64]| z.iter().flat_map(|c| [c.re, c.im]).collect::<Vec<f64>>();
    let unpack = |y: &[f64]| (0..r).map(|q| C64::new(y[2 * q], y[2 * q + 1])).collect::<Vec<C64>>();
    let rhs = |_t: f64, y: &[f64]| pack(&field.eval(&unpack(y)));
    match integrate_real(&rhs, &pack(theta0), t_out, opts) {
        Ok(samples) => Ok(Trajectory { t: t_out.to_vec(), theta: samples.iter().map(|y| unpack(y)).collect() }),
        Err((t, samples)) => {
            let m = samples.len();
            let trajectory = Trajectory { t: t_out[..m].to_vec(), theta: samples.iter().map(|y| unpack(y)).collect() };
            Err(Error::FiniteTimeEscape { t, trajectory: Box::new(trajectory) })
        }
    }
}

/// Evenly spaced output times on `[t0, t1]`.
pub fn linspace(t0: f64, t1: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![t0],
        _ => (0..n).map(|i| t0 + (t1 - t0) * i as f64 / (n - 1) as f64).collect(),
    }
}

/// Trajectory mapped through `K` onto the full perturbation space.
#[derive(Debug, Clone, Serialize)]
pub struct LiftedOrbit {
    pub t: Vec<f64>,
    pub theta: Vec<Vec<C64>>,
    #[serde(skip)]
    pub states: Vec<StateVector>,
    pub observables: Vec<Observables>,
}

impl LiftedOrbit {
    pub fn mean_observables(&self) -> Option<Observables> {
        let n = self.observables.len();
        if n == 0 {
            return None;
        }
        let avg = |f: &dyn Fn(&Observables) -> f64| self.observables.iter().map(f).sum::<f64>() / n as f64;
        let t_ratio = self.observables.iter().map(|o| o.t_ratio).collect::<Option<Vec<f64>>>().map(|v| v.iter().sum::<f64>() / n as f64);
        Some(Observables { e: avg(&|o| o.e), d: avg(&|o| o.d), mwnv: avg(&|o| o.mwnv), svf: avg(&|o| o.svf), t_ratio })
    }
}

/// `U_p = K(theta(t))` with observables of the perturbation. `base` is only
/// used for the polymer stress ratio.
pub fn lift_orbit(
    table: &ExpansionTable,
    model: &FlowModel,
    params: &ModelParams,
    base: Option<&StateVector>,
    trajectory: &Trajectory,
) -> Result<LiftedOrbit> {
    let mut states = Vec::with_capacity(trajectory.theta.len());
    let mut observables = Vec::with_capacity(trajectory.theta.len());
    for theta in &trajectory.theta {
        let u = StateVector::from_full(&model.grid, &table.evaluate_k(theta))?;
        observables.push(model.observables(params, &u, base)?);
        states.push(u);
    }
    Ok(LiftedOrbit { t: trajectory.t.clone(), theta: trajectory.theta.clone(), states, observables })
}

/// One period of the invariant circle at `circle.radius`, sampled at `samples` phases.
pub fn circle_trajectory(circle: &InvariantCircle, samples: usize) -> Trajectory {
    let period = if circle.frequency != 0.0 { 2.0 * std::f64::consts::PI / circle.frequency.abs() } else { 0.0 };
    let t = linspace(0.0, period, samples);
    let theta = t.iter().map(|&t| pair_coordinates(circle.radius, circle.frequency * t).to_vec()).collect();
    Trajectory { t, theta }
}
