//! Monte-Carlo engine for McKean-Vlasov SDEs.
//!
//! Particle-system simulation of the law, decoupled flows driven by the
//! simulated law, first-variation, Lions and Malliavin tangents, and
//! integration-by-parts weights for derivatives, densities and PDE checks.

pub mod coefficients;
pub mod estimators;
pub mod error;
pub mod linalg;
pub mod measures;
pub mod oracles;
pub mod simulator;
pub mod tangents;
pub mod weights;

pub use error::{Error, Result};
pub use linalg::Mat;
pub use measures::EmpiricalMeasure;
