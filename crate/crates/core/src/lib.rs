//! Approximate-multiplier-aware differentiable architecture search.
//!
//! - [`mult`]: 8-bit multiplier tables, error metrics and quantization.
//! - [`tensor`]: autodiff engine with table-driven convolutions.
//! - [`darts`]: cell search space, supernet and genotype discretization.
//! - [`experiment`]: search and final-training pipelines, data, energy accounting.

pub mod darts;
pub mod error;
pub mod experiment;
pub mod mult;
pub mod tensor;

pub use error::{Error, Result};
