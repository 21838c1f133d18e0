//! Group-relative policy optimization with rule-based rewards on a compact
//! slot policy, and a train × test generalization harness.
//!
//! Modules, bottom-up:
//! - [`task`]: synthetic multiple-choice suites, JSONL ingestion, 80/20 splits
//! - [`policy`]: linear-softmax slot policy with exact log-probs and gradients
//! - [`checkpoint`]: bit-exact binary policy serialization
//! - [`reward`]: format and accuracy rewards on rendered text
//! - [`trainer`]: the GRPO objective, its gradient, and GRPO/SFT training loops
//! - [`eval`]: accuracy, generalization matrices, comparison reports
//! - [`config`] and [`cli`]: the `grpo` command-line driver

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod policy;
pub mod reward;
pub mod seed;
pub mod task;
pub mod trainer;

pub use error::{Error, Result};
