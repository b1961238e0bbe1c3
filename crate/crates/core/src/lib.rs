//! Binary-code approximate nearest-neighbor engine.
//!
//! Offline, a k-NN graph over Hamming codes is built as a sequence of
//! map-shuffle-reduce stages: binary k-means on a down-sample, single-pass
//! divide-and-conquer probing of nearby clusters, breadth-first neighborhood
//! propagation, and occlusion pruning. Online, queries start at the nearest
//! of a stored random entry sample, walk the graph best-first, and
//! optionally rerank the binary candidate pool with real-valued distances.

pub mod binarizer;
pub mod bitcore;
pub mod bkmeans;
mod codec;
pub mod config;
pub mod error;
pub mod eval;
pub mod graph;
pub mod graph_build;
pub mod pipeline;
pub mod propagation;
pub mod pruner;
pub mod reference;
pub mod search;
pub mod shard;

pub use bitcore::{hamming, l2_squared, BitCode, Dataset, Label, RealTable};
pub use error::{Error, Result};
