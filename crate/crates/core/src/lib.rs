//! Equilibrium layers for nonlinear exponential-family PCA.

pub mod canonical;
pub mod datagen;
pub mod deep;
pub mod error;
pub mod eval;
pub mod expfam;
pub mod fpsolve;
pub mod io;
pub mod numkernel;
pub mod shallow;
pub mod train;

pub use canonical::{derive_bundle, ActivationBundle, CanonicalMap};
pub use error::{PedError, Result};
pub use expfam::ExpFamily;
pub use fpsolve::{anderson, picard, FixedPointResult, SolverConfig};
pub use shallow::{infer, kappa, PedLayer};
pub use deep::{infer_deep, DeepPedSpec};
