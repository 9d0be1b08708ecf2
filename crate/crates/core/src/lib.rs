//! Decentralized multi-agent CLF-CBF control with rotation-based deadlock
//! resolution gated by a risk indicator.
//!
//! Every numeric item is generic over [`scalar::Real`]; the aliases at the
//! crate root fix the scalar to `f64`.
//!
//! ```
//! use clfcbf::{run, make_ring_scenario, ControllerMode, ControllerParams};
//!
//! let mut cfg = make_ring_scenario(2, 10.0, ControllerParams::default(), ControllerMode::Adaptive);
//! cfg.max_steps = 50;
//! let log = run(&cfg).unwrap();
//! assert_eq!(log.steps.len(), 50);
//! ```

// NaN-rejecting guards read as `!(x > 0)`; matrix kernels index by row and column.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cbf_core;
pub mod controller;
pub mod deadlock_geom;
pub mod linalg_so;
pub mod qp;
pub mod scalar;
pub mod sim;
pub mod unicycle;

pub use cbf_core::{ClassK, GoalDistanceClf, SingleIntegrator};
pub use controller::{ControllerMode, FallbackReason, Plant};
pub use qp::{ConstraintLabel, QpStatus};
pub use scalar::Real;
pub use sim::{make_jittered_ring, make_ring_scenario, run, run_with_plant, sweep, ConfigError};

pub type Vector = linalg_so::Vector<f64>;
pub type Matrix = linalg_so::Matrix<f64>;
pub type AgentState = cbf_core::AgentState<f64>;
pub type ControllerParams = cbf_core::ControllerParams<f64>;
pub type ControlDecision = controller::ControlDecision<f64>;
pub type QpProblem = qp::QpProblem<f64>;
pub type DeadlockGeometry = deadlock_geom::DeadlockGeometry<f64>;
pub type EquilibriumDiagnostics = deadlock_geom::EquilibriumDiagnostics<f64>;
pub type ScenarioConfig = sim::ScenarioConfig<f64>;
pub type TrajectoryLog = sim::TrajectoryLog<f64>;
pub type RunSummary = sim::RunSummary<f64>;
pub type SweepConfig = sim::SweepConfig<f64>;
pub type SweepRow = sim::SweepRow<f64>;
pub type World = sim::World<f64>;
pub type UnicyclePose = unicycle::UnicyclePose<f64>;
