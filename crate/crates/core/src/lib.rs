//! A desk-scale early-fusion mixed-modal transformer.
//!
//! Text and images share one discrete token space: text through a byte-level
//! BPE, images through a patch codebook whose indices sit in their own id
//! range. One decoder-only transformer models the joint sequence. The crate
//! carries the training stabilizers (QK-Norm, post-sublayer norm placement,
//! z-loss, output-norm monitoring), the two-stage data mixture, SFT packing
//! with prompt masking, modality-constrained decoding, and the evaluation
//! arithmetic used to compare models.

pub mod config;
pub mod error;
pub mod numerics;
pub mod data;
pub mod decoder;
pub mod evalkit;
pub mod layers;
pub mod model;
pub mod objective;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};

/// Index into the mixed vocabulary.
pub type TokenId = u32;
