//! Causal multimodal recommendation.
//!
//! The pipeline extracts a per-item confounder representation with two
//! cross-modal conditional diffusion models, discretizes it with an
//! environment codebook, learns per-edge retention masks over the
//! user–item graph, and ranks items with a graph-convolution backbone.

pub mod autograd;
pub mod backbone;
pub mod checkpoint;
pub mod cluster;
pub mod codebook;
pub mod config;
pub mod dataset;
pub mod diffusion;
pub mod error;
pub mod frontdoor;
pub mod gradcheck;
pub mod metrics;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod semantic_graph;
pub mod sparse;

pub use error::{Error, Result};
