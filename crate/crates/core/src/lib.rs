//! Multimodal query/item retrieval with mixture-of-modality-experts fusion,
//! graded multi-objective hinge training, and exact nDCG evaluation.

pub mod cli;
pub mod data_model;
pub mod error;
pub mod fusion;
pub mod kv;
pub mod numerics;
pub mod objectives;
pub mod retrieval_eval;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
