//! Auxiliary-task transfer in linear models.
//!
//! This crate studies a single *main* regression task trained jointly with
//! `K` weighted *auxiliary* tasks that share the same feature matrix. It
//! provides:
//!
//! - exact bias/variance/noise decompositions of the expected main-task
//!   generalization error of the shared weighted least-squares estimator,
//!   and the matching necessary-and-sufficient condition for the auxiliary
//!   tasks to help ([`regression`]);
//! - globally optimal task weights via a convex quadratic program over the
//!   simplex, plus consistent plug-in estimates from raw data
//!   ([`regression`]);
//! - the reduced-rank (width-`q` linear network) estimator, a column-wise
//!   low-rank perturbation bound with its two competitor bounds, and an
//!   expectation bound on the network's generalization error with fully
//!   auditable constants ([`linear_net`]);
//! - a deterministic Monte Carlo harness that validates every closed form
//!   and bound by simulation ([`montecarlo`]), driven by JSON experiment
//!   configs through the `auxlin` CLI ([`experiment`]).
//!
//! All randomness flows through [`rng::RngStream`], a counter-based
//! splittable stream: results are bit-reproducible for a given seed
//! regardless of thread count.

pub mod error;
pub mod experiment;
pub mod linear_net;
pub mod mat;
pub mod montecarlo;
pub mod regression;
pub mod rng;
pub mod taskgen;

pub use error::{Error, Result};
pub use rng::RngStream;

/// Library version recorded in result sidecars.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
