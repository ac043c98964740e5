//! Vision-language pre-training with global InfoNCE alignment and a local
//! contrastive objective supervised by intra-modal similarity, plus the
//! grounding (contrast-to-noise) and linear-probe evaluation stack and a
//! synthetic paired-data generator with planted alignments.

pub mod autograd;
pub mod config;
pub mod data;
pub mod embeddings;
pub mod evaluation;
pub mod encoders;
pub mod model;
pub mod error;
pub mod nn;
pub mod objectives;
pub mod training;

pub use error::{Error, Result};
