//! Continues the subcritical travelling-wave branch out of the Hopf point and
//! reports its folds and energy. A coarse grid keeps this under a minute.

use channel_ssm::continuation::{continue_branch, ContinuationOptions};
use channel_ssm::eigen::EigenOptions;
use channel_ssm::flow::{ContinuationParam, FlowModel, ModelParams, PhaseCondition, SteadyFlow};
use channel_ssm::spectral::ModeGrid;
use channel_ssm::tw;

fn main() -> channel_ssm::Result<()> {
    let which = ContinuationParam::Re;
    let model = FlowModel::new(ModeGrid::new(1.02056, 4, 32, 3)?)?;
    let eig = EigenOptions::default();
    let cp = tw::critical_parameter(&model, &ModelParams::newtonian(3600.0), which, (3000.0, 5000.0), 1e-4, &eig)?;
    let hopf = ModelParams::newtonian(cp.param);
    println!("Hopf point at Re = {:.2}", cp.param);

    let opts = ContinuationOptions { step0: 0.01, step_max: Some(0.02), w_p: 1e-6, max_points: 200, ..Default::default() };
    let start = tw::branch_start(&model, &hopf, which, 1e-3, &eig, &opts)?;
    let problem = SteadyFlow::new(&model, hopf, which, PhaseCondition::Active);
    let mut branch = continue_branch(&problem, &start.x, start.param, -1.0, (3000.0, 5000.0), &opts)?;
    tw::annotate_branch(&model, &hopf, which, &mut branch)?;

    println!("{} points, folds at {:?}", branch.points.len(), branch.folds.iter().map(|f| f.param).collect::<Vec<_>>());
    for p in branch.points.iter().step_by(10) {
        let e = p.observables.map_or(f64::NAN, |o| o.e);
        println!("Re = {:9.2}  e = {e:.4e}", p.param);
    }
    Ok(())
}
