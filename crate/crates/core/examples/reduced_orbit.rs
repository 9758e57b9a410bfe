//! Integrates the reduced dynamics from just inside and just outside the
//! unstable periodic orbit and lifts the trajectories to the flow.

use channel_ssm::eigen::{solve_generalized_eig, split_spectrum, EigenOptions};
use channel_ssm::flow::{FlowModel, ModelParams, PhaseCondition};
use channel_ssm::reduced::{integrate, invariant_radii, lift_orbit, linspace, to_polar, IntegrateOptions, ReducedVectorField};
use channel_ssm::spectral::ModeGrid;
use channel_ssm::ssm::{compute_expansion_from_split, pair_coordinates, FlowSystem, SsmConfig};
use channel_ssm::Error;

fn main() -> channel_ssm::Result<()> {
    let model = FlowModel::new(ModeGrid::new(1.02056, 4, 40, 3)?)?;
    let params = ModelParams::newtonian(3600.0);
    let lam = model.laminar_state(&params)?;
    let ops = model.assemble_linearization(&params, &lam, PhaseCondition::Inactive)?;
    let eigs = solve_generalized_eig(&ops, &model, &EigenOptions::default())?;
    let split = split_spectrum(&eigs, &ops, &model, -0.002, 1e-4)?;
    let sys = FlowSystem { model: &model, params, ops };
    let table = compute_expansion_from_split(&split, &sys, &SsmConfig { order: 3, ..Default::default() })?;

    let field = ReducedVectorField::from_table(&table);
    let rp = invariant_radii(&to_polar(&field)?, 10.0)?[0].radius;
    println!("unstable periodic orbit at r = {rp:.6e}");

    let t = linspace(0.0, 3000.0, 7);
    for scale in [0.9, 1.1] {
        let theta0 = pair_coordinates(scale * rp, 0.0);
        let traj = match integrate(&field, &theta0, &t, &IntegrateOptions::default()) {
            Ok(traj) => traj,
            Err(Error::FiniteTimeEscape { t, trajectory }) => {
                println!("start {scale} r_p: reduced solution escapes at t = {t:.1}");
                *trajectory
            }
            Err(e) => return Err(e),
        };
        let lifted = lift_orbit(&table, &model, &params, None, &traj)?;
        println!("start {scale} r_p:");
        for (t, o) in lifted.t.iter().zip(&lifted.observables) {
            println!("  t = {t:7.1}  e = {:.4e}  d = {:.4e}", o.e, o.d);
        }
    }
    Ok(())
}
