//! Open-vocabulary segmentation by attribute decomposition and hierarchical
//! aggregation.
//!
//! Category names are replaced by sets of attribute descriptions. Each
//! attribute is embedded separately, the set is reduced to a single token
//! through stages of fusion and clustering, and the token segments an image
//! by cosine similarity with the fused visual tokens.

pub mod ablation;
pub mod aggregator;
pub mod catalog;
pub mod config;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod mask;
pub mod ops;
pub mod params;
pub mod pipeline;
pub mod synth;
pub mod tape;
pub mod train;

pub use error::{Error, Result};
