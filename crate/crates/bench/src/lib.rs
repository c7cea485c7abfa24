//! Experiment runner for the smoothed functional bilevel solver: config
//! files, seed fan-out over a thread pool, ledger and sidecar output, and
//! per-cell summaries.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checks;
pub mod config;
pub mod grid;
pub mod summary;
