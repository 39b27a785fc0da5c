use std::ops::Range;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tokenizer::MixedVocab;
use crate::TokenId;

/// Emits `[BOI image EOI text]` or `[text BOI image EOI]` with equal
/// probability. `image` holds the bare codebook tokens of one image.
pub fn rotate_caption_pair<R: Rng + ?Sized>(
    image: &[TokenId],
    text: &[TokenId],
    vocab: &MixedVocab,
    k: usize,
    rng: &mut R,
) -> Result<Vec<TokenId>> {
    if image.len() != k {
        return Err(Error::MalformedBlock {
            offset: 0,
            reason: format!("expected {k} image tokens, got {}", image.len()),
        });
    }
    if let Some(i) = image.iter().position(|&t| !vocab.is_image(t)) {
        return Err(Error::MalformedBlock {
            offset: i,
            reason: format!("token {} is not an image token", image[i]),
        });
    }
    let mut block = Vec::with_capacity(k + 2);
    block.push(vocab.boi());
    block.extend_from_slice(image);
    block.push(vocab.eoi());
    let mut out = Vec::with_capacity(block.len() + text.len());
    if rng.random_bool(0.5) {
        out.extend(block);
        out.extend_from_slice(text);
    } else {
        out.extend_from_slice(text);
        out.extend(block);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairedExample {
    pub prompt: Vec<TokenId>,
    pub answer: Vec<TokenId>,
}

impl PairedExample {
    /// Length once laid out as `prompt SEP answer`.
    pub fn packed_len(&self) -> usize {
        self.prompt.len() + 1 + self.answer.len()
    }
}

/// One training row built from whole examples.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedSequence {
    pub tokens: Vec<TokenId>,
    /// Set exactly on answer positions.
    pub loss_mask: Vec<bool>,
    /// Token span of each example, in order.
    pub example_boundaries: Vec<Range<usize>>,
    /// Input index of each example.
    pub example_ids: Vec<usize>,
}

/// An example too long for the sequence length.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rejection {
    pub example: usize,
    pub required_len: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PackOutcome {
    pub sequences: Vec<PackedSequence>,
    pub rejected: Vec<Rejection>,
}

/// Greedy packing in input order: each example goes into the current
/// sequence if it fits, otherwise a new sequence is started. Examples are
/// never split; oversized ones are reported, not truncated.
pub fn pack_sft(examples: &[PairedExample], max_len: usize, vocab: &MixedVocab) -> PackOutcome {
    let mut out = PackOutcome::default();
    let mut cur: Option<PackedSequence> = None;
    for (i, ex) in examples.iter().enumerate() {
        let need = ex.packed_len();
        if need > max_len {
            out.rejected.push(Rejection {
                example: i,
                required_len: need,
            });
            continue;
        }
        if cur.as_ref().is_some_and(|s| s.tokens.len() + need > max_len) {
            out.sequences.extend(cur.take());
        }
        let seq = cur.get_or_insert_with(|| PackedSequence {
            tokens: Vec::with_capacity(max_len),
            loss_mask: Vec::with_capacity(max_len),
            example_boundaries: Vec::new(),
            example_ids: Vec::new(),
        });
        let start = seq.tokens.len();
        seq.tokens.extend_from_slice(&ex.prompt);
        seq.tokens.push(vocab.sep());
        seq.tokens.extend_from_slice(&ex.answer);
        seq.loss_mask.extend(std::iter::repeat_n(false, ex.prompt.len() + 1));
        seq.loss_mask.extend(std::iter::repeat_n(true, ex.answer.len()));
        seq.example_boundaries.push(start..seq.tokens.len());
        seq.example_ids.push(i);
    }
    out.sequences.extend(cur);
    out
}

/// Splits a packed sequence back into its examples.
pub fn unpack(seq: &PackedSequence, vocab: &MixedVocab) -> Result<Vec<PairedExample>> {
    seq.example_boundaries
        .iter()
        .map(|r| {
            let span = &seq.tokens[r.clone()];
            let mask = &seq.loss_mask[r.clone()];
            // The separator is the last position excluded from the loss.
            let sep = mask
                .iter()
                .rposition(|&m| !m)
                .filter(|&p| span[p] == vocab.sep() && mask[..p].iter().all(|&m| !m))
                .ok_or_else(|| Error::MalformedBlock {
                    offset: r.start,
                    reason: "packed example has no separator before its answer".into(),
                })?;
            Ok(PairedExample {
                prompt: span[..sep].to_vec(),
                answer: span[sep + 1..].to_vec(),
            })
        })
        .collect()
}
