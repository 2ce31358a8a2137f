//! Stochastic gradient descent over composite operator chains with perturbed
//! forward and backward passes.

pub mod bounds;
pub mod config;
pub mod error;
pub mod experiments;
pub mod operator;
pub mod optimizer;
pub mod output;
pub mod perturbation;
pub mod tensor;

pub use error::{Error, Result};
