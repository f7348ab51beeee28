//! prunekit: a multitask model-pruning engine.
//!
//! Implements the full 2×2×2 grid of pruning settings — magnitude vs.
//! movement selection, element-wise vs. rank structure, global vs. local
//! scope — on a small transformer-style encoder with hand-written
//! reverse-mode gradients, plus shared-mask multitask training, synthetic
//! planted tasks, budget/Pareto experiment orchestration, and a latency
//! benchmark for dense vs. rank-factored products.

pub mod bench;
pub mod config;
pub mod error;
pub mod experiments;
pub mod linalg;
pub mod multitask;
pub mod nn;
pub mod pruning;
pub mod tasks;

pub use error::{Error, Result};
