//! Deterministic federated-learning simulator for forecasting distributed
//! energy resources.
//!
//! The crate covers the whole experiment path: synthetic or ingested client
//! series ([`data`]), linear and MLP forecasters with analytic gradients
//! ([`model`], [`optim`]), the federated round engine ([`fedcore`]),
//! clustered variants ([`cluster`]), update-level privacy ([`privacy`]),
//! metrics and the method comparison harness ([`eval`]), and the scenario
//! file plus command-line front end ([`config`], [`cli`]).
//!
//! Every random draw comes from a stream derived from one master seed (see
//! [`seed`]), so a `(config, seed)` pair always reproduces the same bytes.
//! With the `parallel` feature (on by default) per-client work runs on the
//! rayon pool; results are identical to the sequential build.

// Range checks are written `!(x > 0.0)` so that NaN fails them too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod cluster;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod exec;
pub mod fedcore;
pub mod model;
pub mod optim;
pub mod privacy;
pub mod seed;

pub use error::{Error, Result};

/// Formats a float with 17 significant digits, the CSV float format.
pub fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}
