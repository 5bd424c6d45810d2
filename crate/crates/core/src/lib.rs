//! Sparse least-squares estimation for feedforward networks.
//!
//! The crate fits networks `x ↦ Θˡ f[Θˡ⁻¹ ⋯ f[Θ⁰ x]]` under an ℓ1 (connection-sparse)
//! or column-grouped ℓ2/ℓ1 (node-sparse) penalty on the outer layer, with the inner
//! layers confined to the corresponding unit ball. Around the estimators sit the tools
//! needed to audit their prediction guarantees empirically: effective-noise maximization,
//! oracle-inequality checks, Lipschitz audits, rate sweeps and synthetic data.

pub mod cli;
pub mod error;
pub mod estimators;
pub mod geometry;
pub mod guarantees;
pub mod net;
pub mod noise;
pub mod seed;
pub mod synth;

pub use error::{Error, Result};
pub use net::{Activation, Architecture, BallConstraint, InnerStack, MatrixNorm, ParamStack};

/// Slack used for unit-ball membership checks.
pub const FEASIBILITY_TOL: f64 = 1e-9;
