//! Continual node classification on graph task streams.
//!
//! The crate trains a two-layer graph convolutional network on a sequence of
//! class-incremental tasks and mitigates catastrophic forgetting with a
//! family of parameter regularizers: quadratic anchoring weighted by diagonal
//! Fisher-information estimates (EWC variants, online EWC, MAS), logit
//! distillation (LwF), and an online curvature penalty that caches
//! sampled-label per-node gradients in a FIFO queue instead of storing
//! Fisher matrices.
//!
//! Modules:
//! - [`graph`]: graph loading/synthesis, adjacency normalization, task schedules
//! - [`model`]: GCN forward pass and hand-derived gradients
//! - [`fim`]: exact and estimated Fisher information, rank diagnostics
//! - [`regularizer`]: penalty strategies and their state (anchors, gradient cache)
//! - [`engine`]: sequential task training with Adam and EMA snapshots
//! - [`metrics`]: accuracy matrices, average performance / average forgetting
//! - [`experiment`]: config-driven strategy x seed grids with CSV reports

pub mod engine;
pub mod error;
pub mod experiment;
pub mod fim;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod regularizer;

pub use error::{Error, Result};
