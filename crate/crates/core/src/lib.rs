//! Active test-time adaptation for instruction-conditioned graph navigation.
//!
//! - [`envgraph`]: synthetic worlds, tasks, distribution shift, geodesics
//! - [`policy`]: tanh encoder + bilinear scorer with analytic gradients
//! - [`meo`]: mixture distribution, entropy, outcome-signed loss
//! - [`sal`]: uncertainty routing, self-prediction head, per-episode update
//! - [`oracles`]: ground-truth, agent and interactive feedback backends
//! - [`metrics`]: SR / OSR / SPL / TL / NE and run reports

pub mod envgraph;
pub mod error;
pub mod meo;
pub mod metrics;
pub mod oracles;
pub mod policy;
pub mod rng;
pub mod sal;

pub use error::{Error, Result};
