//! Embedding-space harness for exemplar-free class-incremental learning in
//! which the feature extractor is pretrained on real initial-step data plus
//! synthetic data of predicted future classes, then frozen while a
//! classifier head is updated step by step.

pub mod data;
pub mod error;
pub mod extractor;
pub mod genbridge;
pub mod heads;
pub mod predictor;
pub mod protocol;
pub mod rng;
pub mod runner;
pub mod world;

pub use data::{ClassId, EmbeddingSample, Origin, Split};
pub use error::{Error, FormatError, Result};
