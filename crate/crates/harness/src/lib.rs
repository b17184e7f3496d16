//! Experiment harness: plans, grid execution, CSV tables and row regeneration.

pub mod error;
pub mod experiments;
pub mod lab;
pub mod plan;
pub mod pool;

pub use error::{Error, Result};
