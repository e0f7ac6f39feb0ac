//! Bi-encoder pre-training with symmetric sentence-anchored and
//! label-anchored contrastive losses, for few-shot and zero-shot relation
//! extraction.

pub mod config;
pub mod corpus;
pub mod encoder;
pub mod episodes;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod pipeline;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
