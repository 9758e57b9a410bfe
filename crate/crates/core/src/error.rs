use thiserror::Error;

use crate::continuation::Branch;
use crate::reduced::Trajectory;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse error classes; the CLI maps each onto a distinct exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Solver,
    Eigen,
    Resonance,
    Io,
}

impl ErrorCategory {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCategory::Config => 2,
            ErrorCategory::Solver => 3,
            ErrorCategory::Eigen => 4,
            ErrorCategory::Resonance => 5,
            ErrorCategory::Io => 6,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ErrorCategory::Config => "config",
            ErrorCategory::Solver => "solver",
            ErrorCategory::Eigen => "eigen",
            ErrorCategory::Resonance => "resonance",
            ErrorCategory::Io => "io",
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate grid: {0}")]
    DegenerateGrid(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("matrix factorization failed: {0}")]
    Factorization(String),

    #[error("no convergence after {iterations} iterations (last residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("continuation stalled at step {step:e} after {} points", branch.points.len())]
    BranchStall { step: f64, branch: Box<Branch> },

    #[error("eigensolver failure: {0}")]
    Eigen(String),

    #[error("pencil is singular at shift {re}{im:+}i; retry with a perturbed shift")]
    ShiftSingular { re: f64, im: f64 },

    #[error("spectral split rejected: eigenvalue {re}{im:+}i lies within the gap band around {beta_split}")]
    SplitRejected { beta_split: f64, re: f64, im: f64 },

    #[error("spectral split is empty: no eigenvalue with real part above {0}")]
    EmptySplit(f64),

    #[error("cross resonance at multi-index {alpha:?}: <alpha, lambda> hits {re}{im:+}i in the complementary spectrum")]
    CrossResonance { alpha: Vec<u32>, re: f64, im: f64 },

    #[error("ill-conditioned coefficient system at multi-index {alpha:?} (rcond {rcond:e}); increase res_tol")]
    IllConditioned { alpha: Vec<u32>, rcond: f64 },

    #[error("expansion table is missing order {0}")]
    MissingOrder(usize),

    #[error("operation requires reduced dimension 2, got {0}")]
    UnsupportedDimension(usize),

    #[error("finite-time escape near t = {t}")]
    FiniteTimeEscape { t: f64, trajectory: Box<Trajectory> },

    #[error("config parse error at line {line}, column {column}: {message}")]
    ConfigParse { line: usize, column: usize, message: String },

    #[error("invalid config: {}", .0.join("; "))]
    ConfigValidation(Vec<String>),

    #[error("output directory {0} is locked by another run")]
    Locked(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::ConfigParse { .. } | Error::ConfigValidation(_) | Error::InvalidParameter(_) => {
                ErrorCategory::Config
            }
            Error::Eigen(_)
            | Error::ShiftSingular { .. }
            | Error::SplitRejected { .. }
            | Error::EmptySplit(_) => ErrorCategory::Eigen,
            Error::CrossResonance { .. } | Error::IllConditioned { .. } => ErrorCategory::Resonance,
            Error::Io(_) | Error::Serde(_) | Error::Locked(_) => ErrorCategory::Io,
            Error::DegenerateGrid(_)
            | Error::Dimension(_)
            | Error::Factorization(_)
            | Error::NoConvergence { .. }
            | Error::BranchStall { .. }
            | Error::MissingOrder(_)
            | Error::UnsupportedDimension(_)
            | Error::FiniteTimeEscape { .. } => ErrorCategory::Solver,
        }
    }
}
