//! Spectral submanifolds, travelling-wave branches and reduced polynomial
//! models for two-dimensional channel flows.
//!
//! The discretization is Fourier in the streamwise direction and Chebyshev
//! collocation (Gauss-Lobatto points) in the wall-normal direction. Both the
//! Newtonian Navier-Stokes equations and the Oldroyd-B model are supported.

pub mod cli;
pub mod continuation;
pub mod eigen;
pub mod error;
pub mod flow;
pub mod io;
pub mod linalg;
pub mod reduced;
pub mod spectral;
pub mod ssm;
pub mod tw;

// Links the system OpenBLAS providing the LAPACK symbols.
extern crate openblas_src;

pub use error::{Error, ErrorCategory, Result};
