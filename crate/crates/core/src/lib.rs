//! Millimeter-wave beam acquisition simulator.
//!
//! Array and channel models, training codebooks, MP/ML/LML direction
//! estimators, the initial-access signaling protocol, overhead
//! optimization and multi-cell scenarios, plus the studies driven by the
//! `beamacq` command-line tool.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod arrays;
pub mod cli;
pub mod channel;
pub mod codebooks;
pub mod config;
pub mod error;
pub mod experiments;
pub mod overhead;
pub mod estimators;
pub mod scenario;
pub mod seeds;
pub mod signaling;
pub mod units;

pub use error::{Error, Result};
