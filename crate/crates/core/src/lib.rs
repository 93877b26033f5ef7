//! Hardness-guided meta-learning for few-shot sequence labelling.
//!
//! A BiLSTM-CRF tagger with an auxiliary domain classifier is meta-trained
//! over episodic K-shot tasks drawn from several source domains. Each task's
//! first-order meta-gradient is weighted by its share of the batch loss, so
//! harder tasks move the shared initialisation further. The trained encoder
//! is then adapted to an unseen target domain from a handful of sentences.

pub mod checkpoint;
pub mod classifier;
pub mod config;
pub mod corpus;
pub mod crf;
pub mod embeddings;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod manifest;
pub mod model;
pub mod optim;
pub mod params;
pub mod rng;
pub mod sampler;
pub mod synth;
pub mod tensor;
pub mod trainer;
pub mod vocab;

pub use error::{Error, Result};
pub use model::ModelParams;
pub use params::ParamGroup;
pub use tensor::Matrix;

/// Version string embedded in every emitted artifact.
pub const CODE_VERSION: &str = concat!("hgda-core ", env!("CARGO_PKG_VERSION"));
