//! Group balancing with synthetic data, classical oversampling baselines,
//! risk and bias diagnostics, scaling-law simulators, and an explicit-weight
//! transformer that generates tabular token pairs in context.
//!
//! Every stochastic operation takes an explicit RNG so replicates are
//! reproducible from a seed; see [`rng`].

pub mod balance;
pub mod data;
pub mod dgp;
pub mod risk;
pub mod rng;
pub mod scaling;
pub mod tfgen;

mod error;

pub use error::{Error, Result};
