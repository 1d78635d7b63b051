//! Explainable grid-graph GNN classifier for grayscale target imagery.
//!
//! Images become 8-connected grid graphs, a stack of GraphSAGE layers
//! (mean aggregation, ReLU update, grid max-pooling, channel and spatial
//! attention) feeds an MLP head, and the recorded forward pass is turned
//! back into pixel-level saliency maps with a top-N confidence report.
//!
//! Module map:
//! - [`graph_builder`]: image to grid graph, coarsening, vertex to pixel mapping
//! - [`tensor`]: dense tensors with a reverse-mode tape
//! - [`model`]: the network, its forward pass and the model file format
//! - [`training`]: lasso-regularized training, evaluation, pruning
//! - [`explain`]: vertex importance, saliency back-projection, reports
//! - [`dataset_io`]: directory datasets, synthetic data, splits, persistence
//! - [`cli`]: the `gridsage` command line

pub mod cli;
pub mod dataset_io;
pub mod error;
pub mod explain;
pub mod graph_builder;
pub mod model;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use graph_builder::{build_grid_graph, GridGraph, Image};
pub use model::{Architecture, ModelParams, UpdateRule};
pub use tensor::{Tape, Tensor, Var};
