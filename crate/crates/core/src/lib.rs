//! Primal-dual natural actor-critic with a multi-layer neural critic for
//! average-reward constrained MDPs.
//!
//! The crate is organized bottom-up:
//!
//! - [`cmdp`]: tabular CMDPs, the garnet generator and softmax policies.
//! - [`oracle`]: exact ground truth (stationary distributions, Q-functions,
//!   gradients, Fisher matrices, the occupancy LP, mixing times).
//! - [`sampler`]: the persistent trajectory cursor and the multi-level Monte
//!   Carlo (MLMC) combinator.
//! - [`critic`]: the 1/sqrt(m)-scaled feedforward critic and its projected
//!   semi-gradient inner loop.
//! - [`npg`]: the natural-policy-gradient inner loop.
//! - [`pdnac`]: the outer primal-dual loop and run metrics.
//! - [`experiment`]: experiment specs and config overrides used by the CLI.
//! - [`acceptance`]: the property and trend checks behind `pdnac check`.

pub mod acceptance;
pub mod cmdp;
pub mod critic;
mod error;
pub mod experiment;
pub mod npg;
pub mod oracle;
pub mod pdnac;
pub mod rng;
pub mod sampler;

pub use error::{Error, Result};
