//! Sparse sub-model extraction, federated LoRA fine-tuning and masked
//! heterogeneous aggregation, simulated end to end on a toy transformer.
//!
//! A dense base model is pretrained on a synthetic eight-domain corpus,
//! pruned into sparse client models, and each client fine-tunes a low-rank
//! adapter on its own shard. Adapters are merged back through
//! [`aggregation::heteagg`], which averages each position only over the
//! participants that actually hold a weight there, so sparse clients keep
//! their zeros while the global adapter stays dense.

pub mod aggregation;
pub mod corpus;
pub mod error;
pub mod evalio;
pub mod federation;
pub mod math;
pub mod model;
pub mod pruning;
pub mod runner;

pub use error::{Error, Result};
