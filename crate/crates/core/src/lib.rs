//! Multi-agent emergent communication under bandwidth and complexity budgets.

pub mod agents;
pub mod complexity;
pub mod envs;
pub mod error;
pub mod filter;
pub mod harness;
pub mod metrics;
pub mod nnet;
pub mod orchestrator;
pub mod trainer;

pub use error::{Error, Result};
