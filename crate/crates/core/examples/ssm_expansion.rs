//! Order-3 spectral submanifold of the laminar state below criticality, its
//! resonance log and the polar form of the reduced dynamics.

use channel_ssm::eigen::{solve_generalized_eig, split_spectrum, EigenOptions};
use channel_ssm::flow::{FlowModel, ModelParams, PhaseCondition};
use channel_ssm::reduced::{invariant_radii, to_polar, ReducedVectorField};
use channel_ssm::spectral::ModeGrid;
use channel_ssm::ssm::{compute_expansion_from_split, max_coefficient_residual, FlowSystem, SsmConfig, Style};

fn main() -> channel_ssm::Result<()> {
    let model = FlowModel::new(ModeGrid::new(1.02056, 6, 40, 3)?)?;
    let params = ModelParams::newtonian(3600.0);
    let lam = model.laminar_state(&params)?;
    let ops = model.assemble_linearization(&params, &lam, PhaseCondition::Inactive)?;
    let eigs = solve_generalized_eig(&ops, &model, &EigenOptions::default())?;
    let split = split_spectrum(&eigs, &ops, &model, -0.002, 1e-4)?;
    println!("master eigenvalues: {:?}", split.sigma1.iter().map(|p| p.value).collect::<Vec<_>>());

    let sys = FlowSystem { model: &model, params, ops };
    let table = compute_expansion_from_split(&split, &sys, &SsmConfig { order: 3, style: Style::Mixed, ..Default::default() })?;
    for e in &table.resonance_log {
        println!("alpha {}  {:?}", e.alpha, e.resonance);
    }
    println!("max relative invariance residual {:.2e}", max_coefficient_residual(&table));

    let polar = to_polar(&ReducedVectorField::from_table(&table))?;
    println!("rho' = rho ({:+.6e} {:+.6e} rho^2)", polar.radial[0], polar.radial[1]);
    println!("phi' = {:+.6e} {:+.6e} rho^2", polar.angular[0], polar.angular[1]);
    for c in invariant_radii(&polar, 10.0)? {
        println!("invariant circle r = {:.6e}, omega = {:.6}, {:?}", c.radius, c.frequency, c.stability);
    }
    Ok(())
}
