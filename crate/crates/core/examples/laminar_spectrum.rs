//! Laminar Poiseuille flow and the leading part of its linear spectrum.
//!
//! `cargo run --release --example laminar_spectrum -- 3600`

use channel_ssm::eigen::{solve_generalized_eig, EigenOptions};
use channel_ssm::flow::{FlowModel, ModelParams, PhaseCondition};
use channel_ssm::spectral::ModeGrid;

fn main() -> channel_ssm::Result<()> {
    let re: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(3600.0);
    let model = FlowModel::new(ModeGrid::new(1.02056, 4, 40, 3)?)?;
    let params = ModelParams::newtonian(re);
    let lam = model.laminar_state(&params)?;
    println!("laminar forcing f = {:.6e} at Re = {re}", lam.f);

    let ops = model.assemble_linearization(&params, &lam, PhaseCondition::Inactive)?;
    let eigs = solve_generalized_eig(&ops, &model, &EigenOptions::default())?;
    println!("{:>14} {:>14} {:>6}", "Re(lambda)", "Im(lambda)", "mode");
    for p in eigs.iter().take(10) {
        println!("{:>14.6e} {:>14.6e} {:>6?}", p.value.re, p.value.im, p.mode);
    }
    Ok(())
}
