//! Importance-sampled experience replay for value-based reinforcement learning.
//!
//! The crate provides the pieces of a small but complete replay-based training
//! stack in which mini-batches are drawn non-uniformly and the induced bias is
//! corrected with per-sample importance weights:
//!
//! - [`sampling`]: probability distributions over buffer indices, priority
//!   transforms, importance weights, the variance-optimal sampling
//!   distribution, and a sum tree for O(log n) proportional sampling.
//! - [`grad`]: a dense MLP with per-sample gradients, per-sample gradient
//!   norms in closed form, and cheap last-layer surrogate norms.
//! - [`replay`]: a ring buffer of transitions plus priority stores that keep
//!   sum-tree-backed sampling distributions in sync with the buffer.
//! - [`envs`]: enumerable tabular environments (chain, gridworld) and value
//!   iteration, used as ground truth in experiments.
//! - [`agents`]: DQN and C51 training loops wired to uniform, prioritized,
//!   and large-batch down-sampling strategies with their bias corrections.
//! - [`diag`]: variance and convergence-speed estimators, total-variation
//!   studies, rank-sum tests, and CSV/JSON export of per-step records.

// Indexed loops are the house style in the dense numeric kernels; iterator
// rewrites obscure the row/column arithmetic.
#![allow(clippy::needless_range_loop)]

pub mod agents;
pub mod diag;
pub mod envs;
pub mod error;
pub mod grad;
pub mod math;
pub mod replay;
pub mod sampling;
pub mod seeds;

pub use error::{Error, Result};
