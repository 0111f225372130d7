//! Cooperative gradient coding (CoGC) for semi-decentralized federated learning.
//!
//! Clients exchange stochastically quantized model updates with their ring
//! neighbours, upload gradient-coded partial sums to the parameter server,
//! and the server either recovers the exact weighted average or skips the
//! round. The crate simulates that protocol and three baselines over
//! Bernoulli erasure links, and evaluates the closed-form outage probability
//! and convergence bound that go with it.

// `!(x > 0.0)` style guards are used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bound;
pub mod channel;
pub mod config;
pub mod error;
pub mod experiment;
pub mod fl;
pub mod gc_code;
pub mod outage;
pub mod protocols;
pub mod quantize;
pub mod rng;

pub use error::{Error, Result};
