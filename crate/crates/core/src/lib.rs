//! Path-dependent neural jump ODEs for online forecasting of irregularly and
//! incompletely observed stochastic processes, with exact conditional
//! expectation oracles for a suite of synthetic processes.

pub mod error;
pub mod gauss;
pub mod io;
pub mod loss;
pub mod neural;
pub mod njode;
pub mod obs_path;
pub mod signature;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
pub use obs_path::{InitialRegime, InterpolatedPath, ObservedPath, ValidityReport, Violation};
pub use signature::{path_signature, sig_dim, TruncatedSignature};
