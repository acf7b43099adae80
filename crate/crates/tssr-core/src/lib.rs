//! Two-stream sequential recommender over item-ID and content-feature
//! sequences, with hierarchical contrastive alignment between the streams.
//!
//! The crate is self-contained: a small reverse-mode tensor core
//! ([`graph`]), data ingestion and splitting ([`data`]), the two-stream
//! model ([`model`]), the contrastive + autoregressive objectives
//! ([`objectives`]), Adam training ([`training`]), all-ranking evaluation
//! with representation diagnostics ([`evaluation`]), and a deterministic
//! synthetic dataset generator ([`synthgen`]).

pub mod data;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod objectives;
pub mod synthgen;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
