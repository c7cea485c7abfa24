//! Non-stationary functional bilevel optimization with time-smoothed
//! hypergradients.
//!
//! The crate is organised bottom-up:
//!
//! - [`numkit`]: seeded RNG streams, dense linear algebra and reverse-mode
//!   parameter gradients for small feed-forward networks.
//! - [`models`]: MLP and linear-feature predictors, initialisation and
//!   optimizer steps.
//! - [`losses`]: point-wise losses exposing the derivatives the functional
//!   hypergradient needs.
//! - [`drift`]: the drifting single-neuron data-generating process.
//! - [`funcgrad`]: inner solver, adjoint solver and the hypergradient
//!   estimator `g_exp + g_imp`.
//! - [`smoother`]: the windowed hypergradient average, regret ledger and
//!   variance probes.
//! - [`outer_loop`]: oracle-mode and estimation-mode drivers, projection,
//!   comparator-sequence measurements and baselines.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod drift;
pub mod error;
pub mod funcgrad;
pub mod losses;
pub mod models;
pub mod numkit;
pub mod outer_loop;
pub mod smoother;

pub use error::{Error, Result};
