//! Generative item retrieval over balanced k-ary identifier trees.
//!
//! Items are mapped to equal-length token paths through a constrained
//! hierarchical clustering of item embeddings. A small encoder-decoder
//! transformer reads a user's interaction history and scores identifiers
//! token by token; retrieval is a beam search restricted to valid tree
//! paths, so every returned sequence names a real item.
//!
//! Module map:
//!
//! - [`corpus`]: interaction logs, user histories, user splits, synthetic data
//! - [`embeddings`]: item embedding providers used to seed the tree
//! - [`idtree`]: constrained k-means and the identifier tree
//! - [`autodiff`]: dense tensors with a reverse-mode tape
//! - [`model`]: encoder-decoder parameters and forward passes
//! - [`training`]: generation, alignment and ranking losses, Adam, early stopping
//! - [`inference`]: prefix-constrained beam search
//! - [`metrics`]: HR, Recall and NDCG with all-positive ideal gain
//! - [`oracles`]: deliberately naive reference implementations
//! - [`cli`]: command implementations behind the `treeret` binary

pub mod autodiff;
pub mod cli;
pub mod corpus;
pub mod embeddings;
mod error;
pub mod idtree;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod oracles;
pub mod training;

pub use error::{Error, Result};
