//! Kernel optimization as a hierarchical multi-armed bandit.
//!
//! Kernels in the candidate pool are grouped by runtime behaviour, and each
//! (cluster, strategy) pair is an arm scored by an upper confidence bound with
//! a learned compatibility bias. [`orchestrator::run_optimization`] drives the
//! loop against any [`env::Environment`]; [`env::Simulator`] provides one with
//! known ground truth.

// NaN-rejecting checks are written as negated comparisons on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod bandit;
pub mod clustering;
pub mod compatibility;
pub mod env;
pub mod error;
pub mod metrics;
pub mod model;
pub mod orchestrator;
pub mod trajectory;

pub use error::{Error, Result};
pub use model::{
    compute_reward, validate_config, CandidatePool, Config, KernelCandidate, KernelId,
    MeasurementRecord, PullRecord, Strategy, StrategyId,
};
pub use orchestrator::{run_optimization, run_optimization_with, run_regret_experiment, RunResult};
