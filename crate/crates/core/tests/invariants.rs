//! Module-level invariants checked on small flow problems.

use channel_ssm::continuation::{continue_branch, ContinuationOptions};
use channel_ssm::eigen::{solve_generalized_eig, split_spectrum, EigenOptions};
use channel_ssm::flow::{ContinuationParam, FlowModel, ModelParams, PhaseCondition, StateVector, SteadyFlow};
use channel_ssm::linalg::C64;
use channel_ssm::spectral::{cheb_values, gauss_lobatto_points, ModeGrid};
use channel_ssm::ssm::{compute_expansion_from_split, conjugation_defect, pair_coordinates, FlowSystem, Resonance, SsmConfig, Style};
use channel_ssm::tw;

const K: f64 = 1.02056;

fn wave_setup() -> (FlowModel, ModelParams, ContinuationOptions) {
    let model = FlowModel::new(ModeGrid::new(K, 3, 28, 3).unwrap()).unwrap();
    let eig = EigenOptions::default();
    let cp = tw::critical_parameter(&model, &ModelParams::newtonian(3600.0), ContinuationParam::Re, (3000.0, 5000.0), 1e-4, &eig).unwrap();
    let opts = ContinuationOptions { step0: 0.01, step_max: Some(0.02), w_p: 1e-6, max_points: 12, ..Default::default() };
    (model, ModelParams::newtonian(cp.param), opts)
}

/// Shift by half a wavelength: mode n picks up `(-1)^n`.
fn half_shift(model: &FlowModel, x: &[f64]) -> Vec<f64> {
    let g = &model.grid;
    let mut s = StateVector::unpack_real(g, x).unwrap();
    for n in (1..=g.n1).step_by(2) {
        for f in 0..g.nfields {
            for m in 0..=g.n2 {
                let v = s.field(g, n, f)[m];
                s.set(g, n, f, m, -v);
            }
        }
    }
    s.pack_real(g)
}

#[test]
fn converged_waves_are_divergence_free_and_satisfy_wall_conditions() {
    let (model, hopf, opts) = wave_setup();
    let g = model.grid;
    let start = tw::branch_start(&model, &hopf, ContinuationParam::Re, 1e-3, &EigenOptions::default(), &opts).unwrap();
    let problem = SteadyFlow::new(&model, hopf, ContinuationParam::Re, PhaseCondition::Active);
    let branch = continue_branch(&problem, &start.x, start.param, -1.0, (3000.0, 5000.0), &opts).unwrap();
    assert!(branch.points.len() > 5);
    let pts = gauss_lobatto_points(g.n2).unwrap();
    for p in &branch.points {
        // accepted points satisfy the steady equations, re-checked from scratch
        let s = StateVector::unpack_real(&g, &p.x).unwrap();
        let at = hopf.with(ContinuationParam::Re, p.param);
        let res = model.steady_residual(&at, &s, PhaseCondition::Active).unwrap();
        let rmax = res.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(rmax < 1e-10, "residual {rmax:e} at Re {}", p.param);

        for n in 0..=g.n1 {
            let u1 = s.field(&g, n, 0);
            let u2 = s.field(&g, n, 1);
            for &y in &pts {
                let (t, dt, _) = cheb_values(y, g.n2);
                let div: C64 = (0..=g.n2).map(|m| u1[m] * C64::new(0.0, n as f64 * K) * t[m] + u2[m] * dt[m]).sum();
                assert!(div.norm() < 1e-11, "divergence {:e} in mode {n} at x2 = {y}", div.norm());
            }
            for wall in [1.0, -1.0] {
                let (t, _, _) = cheb_values(wall, g.n2);
                for u in [u1, u2] {
                    let w: C64 = u.iter().zip(&t).map(|(a, b)| a * b).sum();
                    assert!(w.norm() < 1e-12, "wall value {:e} in mode {n}", w.norm());
                }
            }
        }
    }
}

#[test]
fn half_wavelength_shift_leaves_branch_norms_unchanged() {
    let (model, hopf, opts) = wave_setup();
    let which = ContinuationParam::Re;
    let start = tw::branch_start(&model, &hopf, which, 1e-3, &EigenOptions::default(), &opts).unwrap();
    let problem = SteadyFlow::new(&model, hopf, which, PhaseCondition::Active);
    let mut a = continue_branch(&problem, &start.x, start.param, -1.0, (3000.0, 5000.0), &opts).unwrap();
    let mut b = continue_branch(&problem, &half_shift(&model, &start.x), start.param, -1.0, (3000.0, 5000.0), &opts).unwrap();
    tw::annotate_branch(&model, &hopf, which, &mut a).unwrap();
    tw::annotate_branch(&model, &hopf, which, &mut b).unwrap();
    assert_eq!(a.points.len(), b.points.len());
    for (p, q) in a.points.iter().zip(&b.points) {
        let (op, oq) = (p.observables.unwrap(), q.observables.unwrap());
        assert!((p.param - q.param).abs() < 1e-9 * p.param);
        assert!((op.e - oq.e).abs() <= 1e-9 * op.e, "{} vs {}", op.e, oq.e);
        assert!((op.d - oq.d).abs() <= 1e-9 * op.d, "{} vs {}", op.d, oq.d);
    }
}

#[test]
fn master_eigenvalues_do_not_depend_on_the_arnoldi_shift() {
    let model = FlowModel::new(ModeGrid::new(K, 2, 32, 3).unwrap()).unwrap();
    let params = ModelParams::newtonian(3600.0);
    let lam = model.laminar_state(&params).unwrap();
    let ops = model.assemble_linearization(&params, &lam, PhaseCondition::Inactive).unwrap();
    let leading = |shift: C64| {
        let opts = EigenOptions { shift, dense_threshold: 0, count: 6, ..Default::default() };
        let eigs = solve_generalized_eig(&ops, &model, &opts).unwrap();
        split_spectrum(&eigs, &ops, &model, -0.002, 1e-4).unwrap().values()
    };
    let a = leading(C64::new(0.1, 0.05));
    let b = leading(C64::new(0.05, 0.4));
    assert_eq!(a.len(), 2);
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).norm() < 1e-7, "{x} vs {y}");
    }
}

struct Laminar {
    model: FlowModel,
    params: ModelParams,
}

impl Laminar {
    fn new() -> Self {
        Laminar { model: FlowModel::new(ModeGrid::new(K, 4, 32, 3).unwrap()).unwrap(), params: ModelParams::newtonian(3600.0) }
    }

    fn table(&self, style: Style) -> (channel_ssm::ssm::ExpansionTable, channel_ssm::eigen::SpectralSplit, channel_ssm::flow::OperatorPair) {
        let lam = self.model.laminar_state(&self.params).unwrap();
        let ops = self.model.assemble_linearization(&self.params, &lam, PhaseCondition::Inactive).unwrap();
        let eigs = solve_generalized_eig(&ops, &self.model, &EigenOptions::default()).unwrap();
        let split = split_spectrum(&eigs, &ops, &self.model, -0.002, 1e-4).unwrap();
        let sys = FlowSystem { model: &self.model, params: self.params, ops: ops.clone() };
        let table = compute_expansion_from_split(&split, &sys, &SsmConfig { order: 3, style, ..Default::default() }).unwrap();
        (table, split, ops)
    }
}

#[test]
fn normal_form_keeps_only_resonant_terms_and_tables_are_conjugation_closed() {
    let lam = Laminar::new();
    let (table, _, _) = lam.table(Style::NormalForm);
    let resonant: Vec<_> = table
        .resonance_log
        .iter()
        .filter(|e| matches!(e.resonance, Resonance::Internal { .. }))
        .map(|e| e.alpha.clone())
        .collect();
    assert_eq!(resonant.len(), 2);
    for m in table.orders.iter().skip(1).flatten() {
        if !resonant.contains(&m.alpha) {
            assert!(m.r.iter().all(|v| *v == C64::default()), "R at {} = {:?}", m.alpha, m.r);
        }
    }
    for style in [Style::NormalForm, Style::Graph, Style::Mixed] {
        let (t, _, _) = lam.table(style);
        let d = conjugation_defect(&t, &lam.model).unwrap();
        assert!(d < 1e-10, "{style:?}: {d:e}");
    }
}

#[test]
fn graph_and_normal_form_parametrize_the_same_manifold() {
    let lam = Laminar::new();
    let (nf, split, ops) = lam.table(Style::NormalForm);
    let (graph, _, _) = lam.table(Style::Graph);
    // graph coordinates are the master-mode projections of the manifold point
    let project = |x: &[C64]| -> Vec<C64> {
        let mx = ops.apply_m(x);
        split.sigma1.iter().map(|m| m.left.iter().zip(&mx).map(|(z, v)| z.conj() * v).sum()).collect()
    };
    let gap = |rho: f64| {
        let x = nf.evaluate_k(&pair_coordinates(rho, 0.3));
        let y = graph.evaluate_k(&project(&x));
        x.iter().zip(&y).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>().sqrt()
    };
    // Every non-resonant monomial through order 3 lives in Fourier modes 0, 2
    // and 3, which hold no master eigenvector, so the two styles agree to
    // roundoff rather than only to O(rho^4).
    for rho in [2e-3, 4e-3, 8e-3] {
        let g = gap(rho);
        assert!(g <= 1e-6 * rho.powi(4), "gap {g:e} at rho {rho}");
    }
}
