//! Siamese verification network trained with a contrastive + regression +
//! cross-entropy objective, with the pair protocols, data pipeline and
//! GAR@FAR evaluation around it.
//!
//! Everything runs in `f64` on the CPU and is deterministic for a fixed seed.

pub mod dataset;
pub mod error;
pub mod evaluator;
pub mod gradcheck;
pub mod graph;
pub mod losses;
pub mod network;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use graph::{Graph, NodeId};
pub use tensor::Tensor;
