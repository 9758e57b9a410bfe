//! Reynolds number at which the Tollmien-Schlichting mode goes unstable.
//!
//! The laminar linearization is block diagonal in the Fourier mode, so the
//! search only needs modes 0 and +-1.

use channel_ssm::eigen::EigenOptions;
use channel_ssm::flow::{ContinuationParam, FlowModel, ModelParams};
use channel_ssm::spectral::ModeGrid;
use channel_ssm::tw;

fn main() -> channel_ssm::Result<()> {
    let model = FlowModel::new(ModeGrid::new(1.02056, 1, 40, 3)?)?;
    let cp = tw::critical_parameter(
        &model,
        &ModelParams::newtonian(3600.0),
        ContinuationParam::Re,
        (3000.0, 4500.0),
        1e-3,
        &EigenOptions::default(),
    )?;
    println!("Re_c = {:.3}", cp.param);
    println!("lambda = {:.3e} in mode {}", cp.eigenvalue, cp.mode);
    println!("phase speed = {:.6}", cp.eigenvalue.im.abs() / model.grid.k);
    println!("{} eigensolves", cp.evaluations);
    Ok(())
}
