//! Contingency model predictive control for linear time-varying systems.

// `!(x > 0.0)` range checks also reject NaN; matrix assembly indexes rows
// and columns explicitly.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod av;
pub mod builder;
pub mod qp;
pub mod scenario;
pub mod toy;
pub mod vehicle;

pub use qp::{
    kkt_residuals, solve_qp, solve_qp_warm, QpError, QpProblem, QpSolution, QpStatus,
    ResidualReport, SolverOptions, WarmStart,
};
pub use scenario::{load_config, run_experiment, ExperimentConfig, ExperimentKind, ScenarioError};
