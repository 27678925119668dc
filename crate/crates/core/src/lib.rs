//! Training engine for implicit collaborative filtering with memory-based,
//! variance-aware negative sampling.
//!
//! The crate is organised around the training pipeline:
//!
//! * [`data`] reads interaction logs, builds index maps and splits, and
//!   simulates false negatives by flipping held-out positives.
//! * [`model`] holds the GMF and MLP scorers, the pairwise logistic loss with
//!   its analytic gradient, and a lazy Adam optimiser.
//! * [`sampler`] implements the negative samplers: uniform, popularity,
//!   rank-based, difficulty-`D` hard negatives, and the memory-based sampler
//!   with score-driven memory refresh and variance-based selection.
//! * [`history`] keeps the per-user ring buffers of epoch-end scores that the
//!   variance term reads.
//! * [`trainer`] runs the mini-batch loop, evaluation and early stopping.
//! * [`eval`] computes Recall@k / NDCG@k and the diagnostic statistics.

pub mod data;
pub mod error;
pub mod eval;
pub mod history;
pub mod math;
pub mod model;
pub mod sampler;
pub mod trainer;

pub use error::{Error, Result};

/// Dense user index in `0..num_users`.
pub type UserIdx = u32;
/// Dense item index in `0..num_items`.
pub type ItemIdx = u32;
