//! Data valuation for offline reinforcement learning.
//!
//! A data value estimator scores every transition of a large source replay
//! buffer by how closely it matches a small target buffer collected under shifted
//! dynamics. Low-value transitions are filtered out before a batch-constrained
//! offline learner is trained, and the resulting policy is evaluated on the
//! target domain.

pub mod buffer;
pub mod divergence;
pub mod neural;
pub mod dve;
pub mod seeds;
pub mod envs;
pub mod offline;
pub mod pipeline;
pub mod cli;
