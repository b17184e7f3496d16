//! Confounder weight filtering for transformer sequence classifiers.

pub mod autodiff;
pub mod corpus;
pub mod crossval;
pub mod delta;
pub mod error;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod sampler;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
