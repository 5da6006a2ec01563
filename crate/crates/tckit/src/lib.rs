//! tckit: desk-scale prompt-based continued pre-training for topic
//! classification, built from scratch.
//!
//! The crate trains a small bidirectional transformer encoder with a
//! prompt-based masked-language objective, optionally combined with a
//! contrastive sentence-embedding objective (single-encoder or
//! momentum dual-encoder), then classifies text either with a
//! fine-tuned head or training-free by cosine similarity to labeled
//! support sentences, with optional embedding whitening.
//!
//! Everything is deterministic given a seed: tokenization, parameter
//! init, batch order, dropout, and optimizer steps. Model math runs in
//! f64; checkpoints store tensors as little-endian f32.

pub mod checkpoint;
pub mod cli;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod moco;
pub mod objectives;
pub mod prompt;
pub mod rng;
pub mod similarity;
pub mod tape;
pub mod tensor;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
