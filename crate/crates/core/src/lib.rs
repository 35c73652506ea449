//! Grassmannian M-estimates of scatter.
//!
//! Geometry of the unimodular SPD manifold ([`manifold`]), Grassmannian
//! distributions and related functions ([`grassmann`]), the M-functional and
//! its derivatives ([`mfunc`]), solvers ([`estimator`]), existence
//! diagnostics ([`diagnostics`]) and Monte Carlo LLN/CLT experiments
//! ([`asymptotics`]).

pub mod asymptotics;
pub mod diagnostics;
pub mod error;
pub mod estimator;
pub mod gradcheck;
pub mod grassmann;
pub mod io;
pub mod manifold;
pub mod mfunc;

pub use error::{GsError, Result};
pub use grassmann::{EmpiricalMeasure, McSpec, Measure, SubspacePoint};
pub use manifold::{ScatterMatrix, TangentVector};
