//! The shared token space: byte-level BPE for text, a patch codebook for
//! images, and the partitioned vocabulary that joins them.

mod bpe;
mod codebook;
mod image;
mod vocab;

pub use bpe::{BpeModel, BYTE_ALPHABET};
pub use codebook::{
    decode_image, encode_image, tokens_per_image, train_codebook, Codebook, CodebookReport,
};
pub use image::Image;
pub use vocab::{MixedVocab, Special, TokenClass, SPECIAL_COUNT};
