//! Distributed optimization over robot mesh networks.
//!
//! The crate is organized bottom-up:
//!
//! - [`graph`]: communication graphs, connectivity predicates and
//!   time-varying (lossy) topology sequences.
//! - [`weights`]: stochastic mixing matrices compatible with a graph.
//! - [`problem`]: separable convex quadratic problems, the target-tracking
//!   and factored least-squares instances, and the centralized oracle.
//! - [`algorithms`]: per-robot update rules for DGD (CTA/ATC), DIGing,
//!   NEXT with a quadratic surrogate, and consensus ADMM.
//! - [`simnet`]: a barrier-synchronous round engine that routes messages
//!   over sampled topologies and records per-iteration metrics.
//! - [`tuner`]: golden-section search and grid sweeps over a scalar
//!   hyperparameter.

pub mod algorithms;
pub mod error;
pub mod graph;
pub mod hexfloat;
mod mix;
pub mod problem;
pub mod simnet;
pub mod tuner;
pub mod weights;

pub use error::{Error, Result};
