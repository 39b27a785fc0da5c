//! Training data: the two-stage source mixture, caption-order rotation, SFT
//! packing with prompt masking, corpus files and batch assembly.

mod batch;
pub mod corpus;
mod mixture;
mod pipeline;
mod sft;
pub mod synthetic;

pub use batch::{BatchSource, PretrainBatches, SftBatches, TrainSequence};
pub use corpus::{CorpusRecord, ImagePrep, MixedEncoder, RecordKind, SourceItem, TokenCorpus};
pub use mixture::{sample_source, MixtureSpec, Stage};
pub use sft::{pack_sft, rotate_caption_pair, unpack, PackOutcome, PackedSequence, PairedExample, Rejection};
pub use pipeline::{TokenizerSpec, Tokenizers};
