use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::corpus::{SourceItem, TokenCorpus};
use super::mixture::{sample_source, MixtureSpec};
use super::sft::{rotate_caption_pair, PackedSequence};
use crate::error::{Error, Result};
use crate::tokenizer::MixedVocab;
use crate::TokenId;

/// A training row: next-token targets are taken where `loss_mask` is set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainSequence {
    pub tokens: Vec<TokenId>,
    pub loss_mask: Vec<bool>,
}

/// Produces the batch for a step. Implementations must depend only on
/// `step` and the random stream handed in, so runs can be replayed.
pub trait BatchSource {
    fn batch(&self, step: u64, rng: &mut ChaCha8Rng) -> Result<Vec<TrainSequence>>;
}

/// Pre-training batches drawn from the two-stage mixture.
#[derive(Clone, Debug)]
pub struct PretrainBatches {
    sources: Vec<Vec<SourceItem>>,
    pub mixture: MixtureSpec,
    pub vocab: MixedVocab,
    pub tokens_per_image: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub total_steps: u64,
}

impl PretrainBatches {
    /// Fails if a mixture source has no items in the corpus.
    pub fn new(
        corpus: &TokenCorpus,
        mixture: MixtureSpec,
        vocab: MixedVocab,
        tokens_per_image: usize,
        batch_size: usize,
        seq_len: usize,
        total_steps: u64,
    ) -> Result<Self> {
        mixture.validate()?;
        if batch_size == 0 || seq_len < 2 {
            return Err(Error::config("batch_size must be positive and seq_len at least 2"));
        }
        let mut sources = Vec::new();
        let mut missing = Vec::new();
        for name in mixture.sources() {
            match corpus.sources.get(&name) {
                Some(items) if !items.is_empty() => sources.push(items.clone()),
                _ => missing.push(name),
            }
        }
        if !missing.is_empty() {
            return Err(Error::config(format!(
                "mixture sources without corpus data: {}",
                missing.join(", ")
            )));
        }
        Ok(PretrainBatches {
            sources,
            mixture,
            vocab,
            tokens_per_image,
            batch_size,
            seq_len,
            total_steps,
        })
    }

    fn sequence(&self, step: u64, rng: &mut ChaCha8Rng) -> Result<TrainSequence> {
        let src = sample_source(step, self.total_steps, &self.mixture, rng)?;
        let items = &self.sources[src];
        let item = &items[rng.random_range(0..items.len())];
        let mut tokens = vec![self.vocab.bos()];
        match item {
            SourceItem::Doc(d) => tokens.extend_from_slice(d),
            SourceItem::Pair { image, text } => tokens.extend(rotate_caption_pair(
                image,
                text,
                &self.vocab,
                self.tokens_per_image,
                rng,
            )?),
        }
        tokens.push(self.vocab.eos());
        if tokens.len() > self.seq_len {
            let start = rng.random_range(0..=tokens.len() - self.seq_len);
            tokens = tokens[start..start + self.seq_len].to_vec();
        }
        Ok(TrainSequence {
            loss_mask: vec![true; tokens.len()],
            tokens,
        })
    }
}

impl BatchSource for PretrainBatches {
    fn batch(&self, step: u64, rng: &mut ChaCha8Rng) -> Result<Vec<TrainSequence>> {
        (0..self.batch_size).map(|_| self.sequence(step, rng)).collect()
    }
}

/// Fine-tuning batches drawn uniformly from packed sequences.
#[derive(Clone, Debug)]
pub struct SftBatches {
    pub sequences: Vec<PackedSequence>,
    pub batch_size: usize,
}

impl SftBatches {
    pub fn new(sequences: Vec<PackedSequence>, batch_size: usize) -> Result<Self> {
        if sequences.is_empty() {
            return Err(Error::Empty("no packed SFT sequences".into()));
        }
        if batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        Ok(SftBatches {
            sequences,
            batch_size,
        })
    }
}

impl BatchSource for SftBatches {
    fn batch(&self, _step: u64, rng: &mut ChaCha8Rng) -> Result<Vec<TrainSequence>> {
        Ok((0..self.batch_size)
            .map(|_| {
                let s = &self.sequences[rng.random_range(0..self.sequences.len())];
                TrainSequence {
                    tokens: s.tokens.clone(),
                    loss_mask: s.loss_mask.clone(),
                }
            })
            .collect())
    }
}
