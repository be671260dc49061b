//! Density-driven optimal control (D2OC) for stochastic linear multi-agent
//! systems.
//!
//! A swarm of agents with discrete-time stochastic LTI dynamics covers a
//! non-uniform target density given as a weighted point cloud. Each agent
//! runs a three-stage cycle: (1) reachability-aware selection of local
//! target samples and a Wasserstein-cost MPC step, (2) coverage-weight
//! update from the transport mass actually delivered, (3) min-weight
//! consensus with neighbors in communication range. The quality metric is
//! the squared 2-Wasserstein distance between the time-averaged empirical
//! output distribution and the target density, computed with an exact
//! transportation-LP solver.
//!
//! The crate is organized around the pipeline:
//!
//! * [`lti`] — agent models, prediction matrices, noisy simulation
//! * [`transport`] — discrete optimal transport, barycenters, empirical
//!   distributions, target-field samplers
//! * [`reachability`] — mean reachable sets (zonotopes), confidence
//!   ellipsoids, projection onto reachable outputs
//! * [`mpc`] — the strictly convex tracking QP and its solvers
//! * [`coordinator`] — the three-stage decentralized cycle
//! * [`sim`] — scenario configuration, Monte Carlo batch execution,
//!   metrics and convergence diagnostics
//!
//! Batch execution is data-parallel over runs when the `parallel` feature
//! (default) is enabled; a sequential path is always available.

pub mod coordinator;
pub mod error;
pub mod lti;
pub mod mpc;
pub mod reachability;
pub mod sim;
pub mod transport;

pub use error::{Error, Result};
