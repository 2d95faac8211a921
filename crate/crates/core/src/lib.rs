//! Knowledge-aware relation extraction for long-tail relations.
//!
//! Sentences are grouped into entity-pair bags and encoded by a CNN or PCNN.
//! Relation labels are arranged in a hierarchy whose nodes carry class
//! embeddings: a fixed part averaged from TransE relation vectors and a part
//! produced by a two-layer graph convolution over the hierarchy. Instance
//! attention runs once per hierarchy level with the class embedding of the
//! candidate relation's ancestor as query, and a second attention weighs the
//! levels before scoring.
//!
//! The numeric core is generic over [`Scalar`] (`f32`, `f64`); the aliases
//! below fix the precision used by the command-line tool.

pub mod attention;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gcn;
pub mod hierarchy;
pub mod kg;
pub mod model;
pub mod pipeline;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tape64 = tensor::Tape<f64>;
pub type Model64 = model::Model<f64>;
pub type EmbeddingTable64 = kg::EmbeddingTable<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Model32 = model::Model<f32>;
