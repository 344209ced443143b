//! Distributed primal-dual optimization over networks with coupled
//! inequality and equality constraints and event-triggered communication.
//!
//! Each agent holds a private objective, a local constraint set and its own
//! share of the coupled constraints. Agents exchange only their multiplier
//! estimates, and only when the estimate has drifted past a decaying
//! threshold since the last broadcast.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod graph;
pub mod harness;
pub mod metrics;
pub mod oracle;
pub mod problem;
pub mod solver;

pub use graph::{GraphError, NetworkGraph};
pub use harness::{run_experiment, ExperimentConfig, ExperimentReport, HarnessError};
pub use metrics::{RunTrace, TraceRow};
pub use oracle::{centralized_solve, kkt_residuals, KktCertificate, OracleConfig, OracleError};
pub use problem::{AgentProblem, LocalSet, ProblemError, ProblemSpec};
pub use solver::{Mode, SolverConfig, SolverError, SolverState, ThresholdKind, ThresholdSchedule};
