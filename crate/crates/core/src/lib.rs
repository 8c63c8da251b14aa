//! Cluster attention (CLATT) for graph neural networks.
//!
//! Nodes of a graph are grouped by one or more clusterings, and every node
//! attends to all members of its cluster alongside ordinary message passing
//! or global attention. The crate covers the full pipeline: graph ingestion
//! and statistics, clustering algorithms and their comparison, a small
//! reverse-mode autodiff core, the layer stack, training and selection of
//! clusterings, and attention-distance analysis.

pub mod analysis;
pub mod clustering;
pub mod error;
pub mod graph;
pub mod model;
pub mod synthetic;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
