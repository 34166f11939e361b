//! File-level commands behind the `varphylo` binary: simulate an alignment,
//! train the variational model on it, and score the fitted parameters.

// `!(x > 0.0)` is how NaN gets rejected along with the out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;

pub use commands::{run_evaluate, run_simulate, run_train, MetricsRow};
pub use config::RunConfig;
