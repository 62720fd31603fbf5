//! Continual prompt tuning for a small frozen encoder–decoder transformer.

pub mod backbone;
pub mod checkpoint;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod prompt_pool;
pub mod tensor;

pub use error::{Error, Result};
