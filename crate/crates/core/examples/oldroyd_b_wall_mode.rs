//! Creeping Oldroyd-B channel flow past the wall-mode instability: order-6
//! reduced dynamics with a stable inner and an unstable outer limit cycle.

use channel_ssm::eigen::{solve_generalized_eig, split_spectrum, EigenOptions};
use channel_ssm::flow::{FlowModel, ModelParams, PhaseCondition};
use channel_ssm::reduced::{invariant_radii, to_polar, ReducedVectorField};
use channel_ssm::spectral::ModeGrid;
use channel_ssm::ssm::{compute_expansion_from_split, FlowSystem, SsmConfig};

fn main() -> channel_ssm::Result<()> {
    let wi: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(13.6);
    let model = FlowModel::new(ModeGrid::new(2.3, 4, 40, 6)?)?;
    let params = ModelParams::oldroyd_b(0.0, wi, 0.9, 1e-2);
    let lam = model.laminar_state(&params)?;
    let ops = model.assemble_linearization(&params, &lam, PhaseCondition::Inactive)?;
    let eigs = solve_generalized_eig(&ops, &model, &EigenOptions::default())?;
    let lead = eigs[0].value.re;
    let next = eigs.iter().map(|p| p.value.re).find(|&re| re < lead - 1e-6).unwrap_or(lead - 1.0);
    println!("leading eigenvalue {:.4e} (mode {:?})", eigs[0].value, eigs[0].mode);

    let split = split_spectrum(&eigs, &ops, &model, 0.5 * (lead + next), 0.25 * (lead - next))?;
    let sys = FlowSystem { model: &model, params, ops };
    let table = compute_expansion_from_split(&split, &sys, &SsmConfig { order: 6, ..Default::default() })?;
    let polar = to_polar(&ReducedVectorField::from_table(&table))?;
    println!("radial coefficients {:?}", polar.radial);
    let circles = invariant_radii(&polar, 10.0)?;
    for c in &circles {
        println!("r = {:.6e}  omega = {:.6}  {:?}", c.radius, c.frequency, c.stability);
    }
    if let [a, b] = circles.as_slice() {
        println!("radius ratio {:.4}", b.radius / a.radius);
    }
    Ok(())
}
