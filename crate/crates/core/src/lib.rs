//! Hierarchical embedding augmentation and structural attention memory for
//! small sequence classifiers.
//!
//! * [`hier_embed`]: per-token layer stacks mixed by softmax layer weights.
//! * [`objectives`]: embedding and hierarchy-alignment losses with analytic
//!   gradients and finite-difference oracles.
//! * [`memory`]: clustering of token states into shared attention blocks,
//!   shift detection, reallocation policy, alignment rectification.
//! * [`model`]: a two-block single-head encoder classifier using both.
//! * [`harness`]: synthetic data, experiment runner, metrics and reports.

pub mod error;
pub mod harness;
pub mod hier_embed;
pub mod memory;
pub mod model;
pub mod objectives;
pub mod parallel;

pub use error::{Error, Result};
