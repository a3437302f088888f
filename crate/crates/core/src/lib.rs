//! Off-policy evaluation of stationary policies in infinite-horizon
//! discounted MDPs with projected state-action balancing weights.
//!
//! The pipeline for one dataset is:
//!
//! 1. build a sieve basis `B_K(s, a)` ([`basis`]),
//! 2. project `Σ_a' π(a'|S') B_k(S', a')` onto `(S, A)` with kernel ridge
//!    regression ([`projection`]),
//! 3. solve the dual of the balancing program for the weights
//!    ([`balancing`]),
//! 4. form the weighted value estimate and its confidence interval
//!    ([`estimators`]).
//!
//! [`env`] and [`tabular`] provide simulation environments and exact
//! oracles, and [`harness`] ties everything into replicated benchmarks.

pub mod balancing;
pub mod basis;
pub mod dataset;
pub mod env;
pub mod error;
pub mod estimators;
pub mod harness;
mod linalg;
pub mod projection;
pub mod tabular;

pub use error::{Error, Result};

pub use faer::Mat;
