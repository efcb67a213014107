//! Contact planning for quadruped locomotion without a fixed gait.
//!
//! The crate searches over per-leg contact sequences with Monte Carlo tree
//! search; each candidate sequence is priced by a condensed force QP rolled
//! out over a single-rigid-body model, optionally blended with a learned
//! value function. A plan-on-model simulation harness closes the loop and
//! drives the ablation and comparison experiments.
//!
//! The numerical core is generic over the scalar type through
//! [`scalar::Real`]; the aliases below fix `f64` for ordinary use.

pub mod contact;
pub mod dynamics;
pub mod experiments;
pub mod fmt;
pub mod mcts;
pub mod mlp;
pub mod ocp;
pub mod qp;
pub mod scalar;
pub mod seed;
pub mod sim;
pub mod vf;

pub use scalar::Real;

/// Trunk state at `f64` precision.
pub type SrbState = dynamics::SrbState<f64>;
/// Per-leg forces at `f64` precision.
pub type ControlForces = dynamics::ControlForces<f64>;
/// Foot positions and contact flags at `f64` precision.
pub type FootState = dynamics::FootState<f64>;
/// Mass and inertia at `f64` precision.
pub type InertiaParams = dynamics::InertiaParams<f64>;
