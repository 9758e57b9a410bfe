//! Declarative runs: a strict JSON config selects a model, grid, parameters
//! and one task; [`run`] executes it and writes the artifacts plus
//! `manifest.json` into the output directory.

use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::continuation::{continue_branch, newton_solve, Branch, BranchPoint, ContinuationOptions, NewtonOptions};
use crate::eigen::{solve_generalized_eig, split_spectrum, EigenOptions, EigenPair};
use crate::error::{Error, Result};
use crate::flow::{ContinuationParam, FlowModel, ModelKind, ModelParams, PhaseCondition, StateVector, SteadyFlow};
use crate::io;
use crate::linalg::C64;
use crate::reduced::{
    circle_trajectory, flag_untrusted, integrate, invariant_radii, lift_orbit, linspace, to_polar, IntegrateOptions,
    InvariantCircle, PolarForm, ReducedVectorField,
};
use crate::spectral::ModeGrid;
use crate::ssm::{
    compute_expansion_from_split, fundamental_radius, max_coefficient_residual, ExpansionTable, FlowSystem, Resonance,
    SsmConfig, Style,
};
use crate::tw;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Laminar,
    Spectrum,
    Tw,
    Continue,
    Ssm,
    Reduce,
    Lift,
}

impl Task {
    fn name(self) -> &'static str {
        match self {
            Task::Laminar => "laminar",
            Task::Spectrum => "spectrum",
            Task::Tw => "tw",
            Task::Continue => "continue",
            Task::Ssm => "ssm",
            Task::Reduce => "reduce",
            Task::Lift => "lift",
        }
    }

    fn needs_ssm(self) -> bool {
        matches!(self, Task::Ssm | Task::Reduce | Task::Lift)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub k: f64,
    pub n1: usize,
    pub n2: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EigenConfig {
    #[serde(default)]
    pub shift: Option<[f64; 2]>,
    #[serde(default)]
    pub count: Option<usize>,
    #[serde(default)]
    pub dense_threshold: Option<usize>,
    /// Only used to mark `in_sigma1` in `spectrum.csv`.
    #[serde(default)]
    pub beta_split: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SsmBlock {
    /// Required; kept optional so a missing value is reported with the other violations.
    #[serde(default)]
    pub beta_split: Option<f64>,
    #[serde(default = "default_gap_tol")]
    pub gap_tol: f64,
    #[serde(default = "default_order")]
    pub order: usize,
    #[serde(default = "default_style")]
    pub style: Style,
    #[serde(default = "default_res_tol")]
    pub res_tol: f64,
    #[serde(default = "default_cross_tol")]
    pub cross_tol: f64,
    #[serde(default = "default_err_tol")]
    pub err_tol: f64,
}

fn default_gap_tol() -> f64 {
    1e-6
}
fn default_order() -> usize {
    SsmConfig::default().order
}
fn default_style() -> Style {
    SsmConfig::default().style
}
fn default_res_tol() -> f64 {
    SsmConfig::default().res_tol
}
fn default_cross_tol() -> f64 {
    SsmConfig::default().cross_tol
}
fn default_err_tol() -> f64 {
    SsmConfig::default().err_tol
}

impl SsmBlock {
    fn config(&self) -> SsmConfig {
        SsmConfig { order: self.order, style: self.style, res_tol: self.res_tol, cross_tol: self.cross_tol, err_tol: self.err_tol }
    }
}

/// Branch seeding and continuation settings for the `tw` and `continue` tasks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BranchBlock {
    #[serde(default = "default_param")]
    pub param: ContinuationParam,
    /// Locate the Hopf point inside this interval first; otherwise `params`
    /// are taken to sit at it. Ignored when starting from `base_state`.
    #[serde(default)]
    pub bracket: Option<[f64; 2]>,
    #[serde(default = "default_amplitude")]
    pub amplitude: f64,
    pub range: [f64; 2],
    /// Initial sense of the parameter; defaults to the sign of the start tangent.
    #[serde(default)]
    pub direction: Option<f64>,
    #[serde(default = "default_step0")]
    pub step0: f64,
    #[serde(default)]
    pub step_max: Option<f64>,
    #[serde(default = "default_w_p")]
    pub w_p: f64,
    #[serde(default = "default_max_points")]
    pub max_points: usize,
    /// Parameter value at which the `tw` task reports the wave.
    #[serde(default)]
    pub target: Option<f64>,
}

fn default_param() -> ContinuationParam {
    ContinuationParam::Re
}
fn default_amplitude() -> f64 {
    1e-3
}
fn default_step0() -> f64 {
    0.01
}
fn default_w_p() -> f64 {
    1e-6
}
fn default_max_points() -> usize {
    500
}

impl BranchBlock {
    fn options(&self) -> ContinuationOptions {
        ContinuationOptions {
            step0: self.step0,
            step_max: Some(self.step_max.unwrap_or(2.0 * self.step0)),
            w_p: self.w_p,
            max_points: self.max_points,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReduceBlock {
    /// Initial reduced coordinates as `[re, im]` pairs.
    #[serde(default)]
    pub theta0: Option<Vec<[f64; 2]>>,
    /// Initial polar radius for a conjugate pair (alternative to `theta0`).
    #[serde(default)]
    pub rho0: Option<f64>,
    #[serde(default)]
    pub phi0: f64,
    pub t_end: f64,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default)]
    pub rtol: Option<f64>,
    #[serde(default)]
    pub atol: Option<f64>,
}

fn default_samples() -> usize {
    201
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LiftBlock {
    #[serde(default = "default_lift_samples")]
    pub samples: usize,
    /// Index into the ascending list of invariant circles.
    #[serde(default)]
    pub circle: usize,
}

fn default_lift_samples() -> usize {
    64
}

impl Default for LiftBlock {
    fn default() -> Self {
        LiftBlock { samples: default_lift_samples(), circle: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelKind,
    pub grid: GridConfig,
    pub params: ModelParams,
    pub task: Task,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eigen: Option<EigenConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ssm: Option<SsmBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub branch: Option<BranchBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reduce: Option<ReduceBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lift: Option<LiftBlock>,
    /// `state.json` of a travelling wave to use instead of the laminar state.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_state: Option<PathBuf>,
    /// Uniform x1 samples in the physical-grid CSV.
    #[serde(default = "default_physical_nx")]
    pub physical_nx: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

fn default_physical_nx() -> usize {
    32
}

impl RunConfig {
    pub fn mode_grid(&self) -> Result<ModeGrid> {
        ModeGrid::new(self.grid.k, self.grid.n1, self.grid.n2, self.model.nfields())
    }

    pub fn eigen_options(&self) -> EigenOptions {
        let mut o = EigenOptions::default();
        if let Some(e) = &self.eigen {
            if let Some([re, im]) = e.shift {
                o.shift = C64::new(re, im);
            }
            if let Some(c) = e.count {
                o.count = c;
            }
            if let Some(d) = e.dense_threshold {
                o.dense_threshold = d;
            }
        }
        o
    }

    /// Every violated constraint, in a stable order.
    pub fn violations(&self) -> Vec<String> {
        let mut v: Vec<String> = self.params.violations(self.model);
        if let Err(e) = ModeGrid::new(self.grid.k, self.grid.n1, self.grid.n2, self.model.nfields()) {
            v.push(format!("grid: {}", strip_kind(&e)));
        }
        if self.physical_nx == 0 {
            v.push("physical_nx must be >= 1".into());
        }
        if let Some(e) = &self.eigen {
            if e.count == Some(0) {
                v.push("eigen.count must be >= 1".into());
            }
            if e.dense_threshold == Some(0) {
                v.push("eigen.dense_threshold must be >= 1".into());
            }
            if e.shift.is_some_and(|s| !s.iter().all(|x| x.is_finite())) {
                v.push("eigen.shift must be finite".into());
            }
            if e.beta_split.is_some_and(|b| !b.is_finite()) {
                v.push("eigen.beta_split must be finite".into());
            }
        }
        let task = self.task.name();
        if self.task.needs_ssm() {
            match &self.ssm {
                None => v.push(format!("task {task} requires an ssm block with ssm.beta_split")),
                Some(s) => {
                    match s.beta_split {
                        None => v.push(format!("ssm.beta_split is required for task {task}")),
                        Some(b) if !b.is_finite() => v.push("ssm.beta_split must be finite".into()),
                        _ => {}
                    }
                    if !(s.gap_tol >= 0.0 && s.gap_tol.is_finite()) {
                        v.push("ssm.gap_tol must be >= 0".into());
                    }
                    v.extend(s.config().violations().into_iter().map(|m| format!("ssm.{m}")));
                }
            }
        } else if self.ssm.is_some() {
            v.push(format!("ssm block is not used by task {task}"));
        }
        match (self.task, &self.branch) {
            (Task::Tw | Task::Continue, None) => v.push(format!("task {task} requires a branch block")),
            (Task::Tw | Task::Continue, Some(b)) => {
                let [lo, hi] = b.range;
                if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                    v.push("branch.range must be finite with range[0] < range[1]".into());
                }
                if let Some([a, c]) = b.bracket {
                    if !(a.is_finite() && c.is_finite() && a < c) {
                        v.push("branch.bracket must be finite with bracket[0] < bracket[1]".into());
                    }
                }
                if !(b.amplitude > 0.0 && b.amplitude.is_finite()) {
                    v.push("branch.amplitude must be > 0".into());
                }
                if !(b.step0 > 0.0 && b.step0.is_finite()) {
                    v.push("branch.step0 must be > 0".into());
                }
                if b.step_max.is_some_and(|m| !(m >= b.step0)) {
                    v.push("branch.step_max must be >= branch.step0".into());
                }
                if !(b.w_p > 0.0 && b.w_p.is_finite()) {
                    v.push("branch.w_p must be > 0".into());
                }
                if b.max_points < 2 {
                    v.push("branch.max_points must be >= 2".into());
                }
                if b.direction.is_some_and(|d| !(d == 1.0 || d == -1.0)) {
                    v.push("branch.direction must be 1 or -1".into());
                }
                if b.param == ContinuationParam::Wi && self.model == ModelKind::Newtonian {
                    v.push("branch.param wi needs the oldroydb model".into());
                }
                match (self.task, b.target) {
                    (Task::Tw, None) => v.push("branch.target is required for task tw".into()),
                    (_, Some(t)) if !(t >= lo && t <= hi) => v.push("branch.target must lie inside branch.range".into()),
                    _ => {}
                }
            }
            (_, Some(_)) => v.push(format!("branch block is not used by task {task}")),
            _ => {}
        }
        match (self.task, &self.reduce) {
            (Task::Reduce, None) => v.push("task reduce requires a reduce block".into()),
            (Task::Reduce, Some(r)) => {
                match (&r.theta0, r.rho0) {
                    (Some(_), Some(_)) | (None, None) => v.push("reduce needs exactly one of reduce.theta0 and reduce.rho0".into()),
                    (None, Some(rho)) if !(rho > 0.0 && rho.is_finite()) => v.push("reduce.rho0 must be > 0".into()),
                    (Some(th), None) if th.iter().flatten().any(|x| !x.is_finite()) => v.push("reduce.theta0 must be finite".into()),
                    _ => {}
                }
                if !(r.t_end > 0.0 && r.t_end.is_finite()) {
                    v.push("reduce.t_end must be > 0".into());
                }
                if r.samples < 2 {
                    v.push("reduce.samples must be >= 2".into());
                }
                if r.rtol.is_some_and(|x| !(x > 0.0)) || r.atol.is_some_and(|x| !(x > 0.0)) {
                    v.push("reduce.rtol and reduce.atol must be > 0".into());
                }
            }
            (_, Some(_)) => v.push(format!("reduce block is not used by task {task}")),
            _ => {}
        }
        match (self.task, &self.lift) {
            (Task::Lift, Some(l)) if l.samples < 2 => v.push("lift.samples must be >= 2".into()),
            (Task::Lift, _) => {}
            (_, Some(_)) => v.push(format!("lift block is not used by task {task}")),
            _ => {}
        }
        if self.base_state.is_some() && matches!(self.task, Task::Laminar | Task::Tw) {
            v.push(format!("base_state is not used by task {task}"));
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::ConfigValidation(v))
        }
    }
}

fn strip_kind(e: &Error) -> String {
    match e {
        Error::InvalidParameter(s) | Error::DegenerateGrid(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Parses and validates a config document. Relative paths inside it are
/// resolved against `base_dir`.
pub fn parse_config(text: &str, base_dir: Option<&Path>) -> Result<RunConfig> {
    let mut cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::ConfigParse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    if let Some(dir) = base_dir {
        for p in [&mut cfg.base_state, &mut cfg.output_dir].into_iter().flatten() {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path)?;
    parse_config(&text, path.parent())
}

// ---------------------------------------------------------------- run

/// Outcome of [`run`]: the process exit code and the manifest written to disk.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub exit_code: i32,
    pub manifest: Value,
    pub output_dir: PathBuf,
}

/// Exclusive claim on an output directory, released on drop.
struct DirLock {
    path: PathBuf,
}

impl DirLock {
    fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(".channel-ssm.lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(DirLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(dir.display().to_string())),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

struct Artifacts {
    dir: PathBuf,
    files: Vec<String>,
}

impl Artifacts {
    fn path(&mut self, name: &str) -> PathBuf {
        self.files.push(name.to_string());
        self.dir.join(name)
    }
}

/// Executes the configured task. `output_dir` overrides the config's value
/// (default `output`). Errors before the output directory is claimed are
/// returned; later ones are recorded in the manifest and the exit code.
pub fn run(config: &RunConfig, output_dir: Option<&Path>) -> Result<RunOutcome> {
    config.validate()?;
    let dir = output_dir.map(Path::to_path_buf).or_else(|| config.output_dir.clone()).unwrap_or_else(|| PathBuf::from("output"));
    fs::create_dir_all(&dir)?;
    let _lock = DirLock::acquire(&dir)?;
    let started = Instant::now();
    let mut art = Artifacts { dir: dir.clone(), files: Vec::new() };
    let result = execute(config, &mut art);
    let wall = started.elapsed().as_secs_f64();

    let mut outputs = Vec::new();
    for name in &art.files {
        let p = dir.join(name);
        if p.exists() {
            outputs.push(json!({ "file": name, "sha256": io::sha256_file(&p)?, "bytes": fs::metadata(&p)?.len() }));
        }
    }
    let (status, summary, error, exit_code) = match result {
        Ok(summary) => ("ok", summary, Value::Null, 0),
        Err(e) => {
            let cat = e.category();
            log::error!("{e}");
            ("error", Value::Null, json!({ "category": cat.name(), "exit_code": cat.exit_code(), "message": e.to_string() }), cat.exit_code())
        }
    };
    let manifest = json!({
        "format": "channel-ssm/manifest",
        "version": io::FORMAT_VERSION,
        "tool": env!("CARGO_PKG_NAME"),
        "tool_version": env!("CARGO_PKG_VERSION"),
        "task": config.task.name(),
        "config": config,
        "threads": rayon::current_num_threads(),
        "wall_time_s": wall,
        "status": status,
        "error": error,
        "outputs": outputs,
        "summary": summary,
    });
    let mpath = dir.join("manifest.json");
    fs::write(&mpath, serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(RunOutcome { exit_code, manifest, output_dir: dir })
}

fn execute(cfg: &RunConfig, art: &mut Artifacts) -> Result<Value> {
    let grid = cfg.mode_grid()?;
    let model = FlowModel::new(grid)?;
    log::info!("task {}: {:?} grid k={} n1={} n2={} ({} unknowns)", cfg.task.name(), cfg.model, grid.k, grid.n1, grid.n2, grid.full_dim());
    match cfg.task {
        Task::Laminar => task_laminar(cfg, &model, art),
        Task::Spectrum => task_spectrum(cfg, &model, art),
        Task::Tw => task_tw(cfg, &model, art),
        Task::Continue => task_continue(cfg, &model, art),
        Task::Ssm | Task::Reduce | Task::Lift => task_ssm(cfg, &model, art),
    }
}

fn value_json(z: C64) -> Value {
    json!([z.re, z.im])
}

fn task_laminar(cfg: &RunConfig, model: &FlowModel, art: &mut Artifacts) -> Result<Value> {
    let lam = model.laminar_state(&cfg.params)?;
    io::write_state(&art.path("state.json"), &model.grid, &cfg.params, &lam)?;
    io::write_physical_csv(&art.path("physical.csv"), model, &lam, cfg.physical_nx)?;
    Ok(json!({ "forcing": lam.f }))
}

/// Base state and the parameters it belongs to.
fn base_state(cfg: &RunConfig, model: &FlowModel) -> Result<(StateVector, ModelParams)> {
    match &cfg.base_state {
        None => Ok((model.laminar_state(&cfg.params)?, cfg.params)),
        Some(path) => {
            let file = io::read_state(path)?;
            let g = file.grid()?;
            let state = file.state()?;
            let state = if g == model.grid { state } else { state.resampled(&g, &model.grid)? };
            // refine on this grid at the configured parameters
            let phase = PhaseCondition::for_state(&model.grid, &state);
            let (state, report) = model.solve_steady(&cfg.params, &state, phase, &NewtonOptions::default())?;
            log::info!("base state refined in {} Newton iterations (residual {:e})", report.iterations, report.residual);
            Ok((state, cfg.params))
        }
    }
}

fn spectrum_of(cfg: &RunConfig, model: &FlowModel, base: &StateVector, params: &ModelParams) -> Result<(Vec<EigenPair>, crate::flow::OperatorPair)> {
    let phase = PhaseCondition::for_state(&model.grid, base);
    let ops = model.assemble_linearization(params, base, phase)?;
    let eigs = solve_generalized_eig(&ops, model, &cfg.eigen_options())?;
    Ok((eigs, ops))
}

fn leading_json(eigs: &[EigenPair], n: usize) -> Value {
    Value::Array(eigs.iter().take(n).map(|p| json!({ "value": value_json(p.value), "mode": p.mode })).collect())
}

fn task_spectrum(cfg: &RunConfig, model: &FlowModel, art: &mut Artifacts) -> Result<Value> {
    let (base, params) = base_state(cfg, model)?;
    let (eigs, _) = spectrum_of(cfg, model, &base, &params)?;
    let beta = cfg.eigen.and_then(|e| e.beta_split).unwrap_or(0.0);
    io::write_spectrum_csv(&art.path("spectrum.csv"), &eigs, beta)?;
    Ok(json!({ "eigenvalues": eigs.len(), "leading": leading_json(&eigs, cfg.eigen_options().count) }))
}

/// First branch point, either seeded at a Hopf point or from `base_state`.
fn branch_seed(cfg: &RunConfig, model: &FlowModel, b: &BranchBlock) -> Result<(BranchPoint, Value)> {
    let opts = b.options();
    let eig = cfg.eigen_options();
    if cfg.base_state.is_some() {
        let (state, params) = base_state(cfg, model)?;
        let problem = SteadyFlow::new(model, params, b.param, PhaseCondition::Active);
        let x = state.pack_real(&model.grid);
        let report = newton_solve(&problem, &x, params.get(b.param), &opts.newton)?;
        let p = BranchPoint {
            x: report.x,
            param: params.get(b.param),
            tangent_param: b.direction.unwrap_or(1.0),
            iterations: report.iterations,
            residual: report.residual,
            stability: None,
            observables: None,
        };
        return Ok((p, json!({ "from": "base_state" })));
    }
    let (params, critical) = match b.bracket {
        Some([lo, hi]) => {
            let cp = tw::critical_parameter(model, &cfg.params, b.param, (lo, hi), 1e-6 * hi.abs().max(1.0), &eig)?;
            log::info!("Hopf point at {:?} = {} (lambda = {})", b.param, cp.param, cp.eigenvalue);
            (cfg.params.with(b.param, cp.param), json!({ "param": cp.param, "eigenvalue": value_json(cp.eigenvalue), "mode": cp.mode }))
        }
        None => (cfg.params, Value::Null),
    };
    let start = tw::branch_start(model, &params, b.param, b.amplitude, &eig, &opts)?;
    Ok((start, json!({ "from": "hopf", "critical": critical })))
}

fn trace_branch(cfg: &RunConfig, model: &FlowModel, b: &BranchBlock) -> Result<(Branch, Value)> {
    let (start, seed) = branch_seed(cfg, model, b)?;
    let direction = b.direction.unwrap_or(if start.tangent_param < 0.0 { -1.0 } else { 1.0 });
    let problem = SteadyFlow::new(model, cfg.params, b.param, PhaseCondition::Active);
    let mut branch = continue_branch(&problem, &start.x, start.param, direction, (b.range[0], b.range[1]), &b.options())?;
    tw::annotate_branch(model, &cfg.params, b.param, &mut branch)?;
    Ok((branch, seed))
}

fn branch_summary(branch: &Branch, seed: Value) -> Value {
    let sign_changes = branch.points.windows(2).filter(|w| w[0].tangent_param * w[1].tangent_param < 0.0).count();
    json!({
        "seed": seed,
        "points": branch.points.len(),
        "folds": branch.folds.iter().map(|f| f.param).collect::<Vec<_>>(),
        "tangent_sign_changes": sign_changes,
    })
}

fn task_continue(cfg: &RunConfig, model: &FlowModel, art: &mut Artifacts) -> Result<Value> {
    let b = cfg.branch.expect("validated");
    match trace_branch(cfg, model, &b) {
        Ok((branch, seed)) => {
            io::write_branch_csv(&art.path("branch.csv"), &branch)?;
            Ok(branch_summary(&branch, seed))
        }
        Err(Error::BranchStall { step, mut branch }) => {
            // keep what was traced before reporting the stall
            tw::annotate_branch(model, &cfg.params, b.param, &mut branch)?;
            io::write_branch_csv(&art.path("branch.csv"), &branch)?;
            Err(Error::BranchStall { step, branch })
        }
        Err(e) => Err(e),
    }
}

fn task_tw(cfg: &RunConfig, model: &FlowModel, art: &mut Artifacts) -> Result<Value> {
    let b = cfg.branch.expect("validated");
    let target = b.target.expect("validated");
    let (branch, seed) = trace_branch(cfg, model, &b)?;
    io::write_branch_csv(&art.path("branch.csv"), &branch)?;
    let state = tw::state_on_branch(model, &cfg.params, b.param, &branch, target, &NewtonOptions::default())?;
    let params = cfg.params.with(b.param, target);
    io::write_state(&art.path("state.json"), &model.grid, &params, &state)?;
    io::write_physical_csv(&art.path("physical.csv"), model, &state, cfg.physical_nx)?;
    let obs = tw::perturbation_observables(model, &params, &state)?;
    let mut summary = branch_summary(&branch, seed);
    summary["target"] = json!(target);
    summary["phase_speed"] = json!(state.c);
    summary["observables"] = serde_json::to_value(obs)?;
    Ok(summary)
}

/// Directions sampling the reduced coordinates for the fundamental domain:
/// each coordinate together with its conjugate partner, at three phases.
fn domain_directions(table: &ExpansionTable) -> Vec<Vec<C64>> {
    let r = table.r;
    let mut dirs = Vec::new();
    for q in 0..r {
        let partner = table.first.conjugate_of[q];
        if partner.is_some_and(|p| p < q) {
            continue;
        }
        for phi in [0.0, std::f64::consts::FRAC_PI_4, std::f64::consts::FRAC_PI_2] {
            let mut d = vec![C64::default(); r];
            let z = C64::from_polar(1.0, phi);
            d[q] = z;
            if let Some(p) = partner {
                d[p] = z.conj();
            }
            dirs.push(d);
        }
    }
    dirs
}

fn polar_json(polar: &PolarForm, circles: &[InvariantCircle]) -> Value {
    json!({
        "radial": polar.radial,
        "angular": polar.angular,
        "equivariance_defect": polar.equivariance_defect,
        "circles": circles,
    })
}

fn task_ssm(cfg: &RunConfig, model: &FlowModel, art: &mut Artifacts) -> Result<Value> {
    let s = cfg.ssm.expect("validated");
    let (base, params) = base_state(cfg, model)?;
    let (eigs, ops) = spectrum_of(cfg, model, &base, &params)?;
    let beta = s.beta_split.expect("validated");
    io::write_spectrum_csv(&art.path("spectrum.csv"), &eigs, beta)?;
    let split = split_spectrum(&eigs, &ops, model, beta, s.gap_tol)?;
    log::info!("reduced dimension r = {} (values {:?})", split.r, split.values());
    let sys = FlowSystem { model, params, ops };
    let table = compute_expansion_from_split(&split, &sys, &s.config())?;
    io::write_expansion(&art.path("ssm.json"), &table)?;

    let internal: Vec<String> = table
        .resonance_log
        .iter()
        .filter(|e| matches!(e.resonance, Resonance::Internal { .. }))
        .map(|e| e.alpha.to_string())
        .collect();
    // geometric scan upper bound; the defect passes err_tol long before this
    let r_cap = 10.0;
    let domain = fundamental_radius(&table, &sys, &domain_directions(&table), s.err_tol, r_cap)?;
    let mut summary = json!({
        "r": table.r,
        "order": table.order,
        "eigenvalues": split.values().into_iter().map(value_json).collect::<Vec<_>>(),
        "modes": split.sigma1.iter().map(|m| m.mode).collect::<Vec<_>>(),
        "internal_resonances": internal,
        "max_coefficient_residual": max_coefficient_residual(&table),
        "fundamental_radius": domain,
    });

    let field = ReducedVectorField::from_table(&table);
    let polar = if table.r == 2 {
        let polar = to_polar(&field)?;
        let mut circles = invariant_radii(&polar, r_cap)?;
        flag_untrusted(&mut circles, domain);
        summary["polar"] = polar_json(&polar, &circles);
        Some((polar, circles))
    } else {
        None
    };

    let lam_ref = if cfg.model == ModelKind::OldroydB { Some(&base) } else { None };
    match cfg.task {
        Task::Reduce => {
            let rb = cfg.reduce.clone().expect("validated");
            let theta0: Vec<C64> = match (&rb.theta0, rb.rho0) {
                (Some(th), _) => th.iter().map(|&[a, b]| C64::new(a, b)).collect(),
                (None, Some(rho)) => {
                    if table.r != 2 {
                        return Err(Error::UnsupportedDimension(table.r));
                    }
                    crate::ssm::pair_coordinates(rho, rb.phi0).to_vec()
                }
                _ => unreachable!("validated"),
            };
            let mut opts = IntegrateOptions::default();
            if let Some(x) = rb.rtol {
                opts.rtol = x;
            }
            if let Some(x) = rb.atol {
                opts.atol = x;
            }
            let t_out = linspace(0.0, rb.t_end, rb.samples);
            let (traj, escape) = match integrate(&field, &theta0, &t_out, &opts) {
                Ok(t) => (t, None),
                Err(Error::FiniteTimeEscape { t, trajectory }) => (*trajectory, Some(t)),
                Err(e) => return Err(e),
            };
            let orbit = lift_orbit(&table, model, &params, lam_ref, &traj)?;
            io::write_orbit_csv(&art.path("orbit.csv"), &orbit)?;
            summary["escape_time"] = json!(escape);
            summary["final_theta"] = json!(traj.theta.last().map(|t| t.iter().map(|z| value_json(*z)).collect::<Vec<_>>()));
            if let Some(t) = escape {
                return Err(Error::FiniteTimeEscape { t, trajectory: Box::new(traj) });
            }
        }
        Task::Lift => {
            let lb = cfg.lift.unwrap_or_default();
            let (_, circles) = polar.ok_or(Error::UnsupportedDimension(table.r))?;
            let circle = circles.get(lb.circle).ok_or_else(|| {
                Error::InvalidParameter(format!("lift.circle = {} but only {} invariant circles were found", lb.circle, circles.len()))
            })?;
            let traj = circle_trajectory(circle, lb.samples);
            let orbit = lift_orbit(&table, model, &params, lam_ref, &traj)?;
            io::write_orbit_csv(&art.path("orbit.csv"), &orbit)?;
            summary["lifted"] = json!({
                "circle": circle,
                "period": traj.t.last(),
                "mean_observables": orbit.mean_observables(),
            });
        }
        _ => {}
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{"model": "newtonian", "grid": {"k": 1.02056, "n1": 30, "n2": 40}, "params": {"re": 3600}, "task": "laminar"}"#;

    #[test]
    fn minimal_laminar_config_is_valid() {
        let c = parse_config(MINIMAL, None).unwrap();
        assert_eq!(c.task, Task::Laminar);
        assert_eq!(c.mode_grid().unwrap().nfields, 3);
        assert_eq!(c.params.re, 3600.0);
    }

    #[test]
    fn negative_re_is_a_validation_error() {
        let text = MINIMAL.replace("3600", "-5");
        match parse_config(&text, None) {
            Err(Error::ConfigValidation(v)) => assert!(v.iter().any(|m| m == "re must be ≥ 0"), "{v:?}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn ssm_without_beta_split_names_the_field() {
        let text = MINIMAL.replace(r#""task": "laminar""#, r#""task": "ssm", "ssm": {"order": 3}"#);
        match parse_config(&text, None) {
            Err(e @ Error::ConfigValidation(_)) => {
                assert!(e.to_string().contains("ssm.beta_split"), "{e}");
                assert_eq!(e.category().exit_code(), 2);
            }
            other => panic!("{other:?}"),
        }
        let text = MINIMAL.replace(r#""task": "laminar""#, r#""task": "ssm""#);
        assert!(parse_config(&text, None).unwrap_err().to_string().contains("beta_split"));
    }

    #[test]
    fn unknown_keys_are_named() {
        let text = MINIMAL.replace(r#""re": 3600"#, r#""re": 3600, "mach": 0.3"#);
        let e = parse_config(&text, None).unwrap_err();
        assert!(matches!(e, Error::ConfigParse { .. }));
        assert!(e.to_string().contains("mach"), "{e}");
        let text = MINIMAL.replace(r#""task""#, r#""tsak": 1, "task""#);
        assert!(parse_config(&text, None).unwrap_err().to_string().contains("tsak"));
    }

    #[test]
    fn syntax_errors_carry_line_and_column() {
        let text = "{\n  \"model\": \"newtonian\",\n  \"grid\": {\"k\": 1.0,, }\n}";
        match parse_config(text, None) {
            Err(Error::ConfigParse { line, column, .. }) => {
                assert_eq!(line, 3);
                assert!(column > 10);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn all_violations_are_listed() {
        let text = r#"{"model": "oldroydb", "grid": {"k": -1, "n1": 0, "n2": 40}, "params": {"re": 0, "wi": 0, "beta_visc": 2},
            "task": "continue", "branch": {"range": [5, 1], "target": 9}}"#;
        match parse_config(text, None) {
            Err(Error::ConfigValidation(v)) => {
                for needle in ["wi must be > 0", "beta_visc", "grid: k must be > 0", "branch.range", "branch.target"] {
                    assert!(v.iter().any(|m| m.contains(needle)), "{needle} missing from {v:?}");
                }
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn blocks_must_match_the_task() {
        let text = MINIMAL.replace(r#""task": "laminar""#, r#""task": "laminar", "reduce": {"rho0": 0.1, "t_end": 1}"#);
        assert!(parse_config(&text, None).unwrap_err().to_string().contains("reduce block is not used"));
        let text = MINIMAL.replace(r#""task": "laminar""#, r#""task": "reduce", "ssm": {"beta_split": -0.002}, "reduce": {"t_end": 1}"#);
        assert!(parse_config(&text, None).unwrap_err().to_string().contains("exactly one of"));
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let text = MINIMAL.replace(r#""task": "laminar""#, r#""task": "spectrum", "base_state": "tw/state.json", "output_dir": "out""#);
        let c = parse_config(&text, Some(Path::new("/data/runs"))).unwrap();
        assert_eq!(c.base_state.unwrap(), Path::new("/data/runs/tw/state.json"));
        assert_eq!(c.output_dir.unwrap(), Path::new("/data/runs/out"));
    }

    #[test]
    fn locked_directory_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let _held = DirLock::acquire(dir.path()).unwrap();
        let c = parse_config(MINIMAL, None).unwrap();
        let e = run(&c, Some(dir.path())).unwrap_err();
        assert!(matches!(e, Error::Locked(_)));
        assert_eq!(e.category().exit_code(), 6);
        drop(_held);
        assert!(!dir.path().join(".channel-ssm.lock").exists());
    }

    #[test]
    fn laminar_run_is_bit_identical() {
        let text = MINIMAL.replace(r#""n1": 30, "n2": 40"#, r#""n1": 2, "n2": 24"#);
        let c = parse_config(&text, None).unwrap();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ra = run(&c, Some(a.path())).unwrap();
        let rb = run(&c, Some(b.path())).unwrap();
        assert_eq!(ra.exit_code, 0);
        assert_eq!(ra.manifest["outputs"], rb.manifest["outputs"]);
        let files: Vec<&str> = ra.manifest["outputs"].as_array().unwrap().iter().map(|o| o["file"].as_str().unwrap()).collect();
        assert_eq!(files, ["state.json", "physical.csv"]);
        let state = io::read_state(&a.path().join("state.json")).unwrap();
        assert_eq!(state.params, c.params);
        assert!(a.path().join("manifest.json").exists());
        assert!(!a.path().join(".channel-ssm.lock").exists());
    }

    #[test]
    fn module_errors_land_in_the_manifest() {
        // beta_split above every eigenvalue leaves the split empty
        let text = r#"{"model": "newtonian", "grid": {"k": 1.02056, "n1": 2, "n2": 24}, "params": {"re": 3600},
            "task": "ssm", "ssm": {"beta_split": 5.0}}"#;
        let c = parse_config(text, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let out = run(&c, Some(dir.path())).unwrap();
        assert_eq!(out.exit_code, 4);
        assert_eq!(out.manifest["status"], "error");
        assert_eq!(out.manifest["error"]["category"], "eigen");
        let on_disk: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
        assert_eq!(on_disk["error"]["exit_code"], 4);
        // the spectrum written before the failure is still listed
        assert_eq!(on_disk["outputs"][0]["file"], "spectrum.csv");
    }
}
