//! Constrained mean-field variational inference for pairwise scene-graph
//! factor models.
//!
//! The crate builds factor-graph instances over objects, predicates and
//! global context nodes, scores them with a small MLP feature model, solves
//! each node's simplex-constrained variational objective by entropic mirror
//! descent, and trains the model with cross-entropy on closed-form
//! posteriors. Synthetic data with planted labels, long-tail resampling and
//! recall metrics round out a desk-scale experiment loop.
//!
//! Module map:
//! - [`factor_graph`]: instances, node ids, adjacency, label assignments.
//! - [`scoring`]: the feature model, potentials, message terms, marginal and
//!   joint log scores.
//! - [`inference`]: the mirror-descent solver, a projected-gradient baseline,
//!   softmax and exact-enumeration oracles, per-graph posteriors.
//! - [`learning`]: cross-entropy loss, reverse-mode gradients, SGD/Adam
//!   training, checkpoints.
//! - [`synthdata`]: instance generation, head/body/tail splits, bi-level
//!   resampling, dataset files.
//! - [`metrics`]: triplet ranking, R@K, mean recall, group means, the
//!   weighted score.

pub mod error;
pub mod factor_graph;
pub mod inference;
pub mod learning;
pub mod metrics;
pub mod scoring;
pub mod synthdata;

pub use error::{Error, Result};
