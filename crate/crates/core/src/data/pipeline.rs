//! Tokenizer training over a corpus and the on-disk tokenizer directory:
//! `bpe.txt`, `codebook.bin` and a `tokenizer` key-value file.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::Rng;

use super::corpus::{CorpusRecord, MixedEncoder, TokenCorpus};
use crate::config::{parse_value, KeyValues, Settings};
use crate::error::{Error, Result};
use crate::tokenizer::{train_codebook, BpeModel, Codebook, CodebookReport, Image, MixedVocab};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenizerSpec {
    /// Upper bound on the text vocabulary; training may stop short of it.
    pub text_vocab: usize,
    pub codebook_size: usize,
    pub patch: usize,
    pub image_side: usize,
    pub kmeans_iters: usize,
}

impl Default for TokenizerSpec {
    fn default() -> Self {
        TokenizerSpec {
            text_vocab: 320,
            codebook_size: 16,
            patch: 4,
            image_side: 16,
            kmeans_iters: 10,
        }
    }
}

impl Settings for TokenizerSpec {
    fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("text_vocab", self.text_vocab);
        kv.set("codebook_size", self.codebook_size);
        kv.set("patch", self.patch);
        kv.set("image_side", self.image_side);
        kv.set("kmeans_iters", self.kmeans_iters);
        kv
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "text_vocab" => self.text_vocab = parse_value(key, v)?,
            "codebook_size" => self.codebook_size = parse_value(key, v)?,
            "patch" => self.patch = parse_value(key, v)?,
            "image_side" => self.image_side = parse_value(key, v)?,
            "kmeans_iters" => self.kmeans_iters = parse_value(key, v)?,
            other => return Err(Error::config(format!("unknown tokenizer key `{other}`"))),
        }
        Ok(())
    }
}

/// Trained text and image tokenizers with their joint vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct Tokenizers {
    pub bpe: BpeModel,
    pub codebook: Codebook,
    pub vocab: MixedVocab,
    pub image_side: usize,
}

impl Tokenizers {
    /// Trains BPE on every text field and the codebook on every referenced
    /// image (each used once, centre-cropped to `image_side`).
    pub fn train<R: Rng + ?Sized>(
        records: &[CorpusRecord],
        images: &dyn Fn(&str) -> Result<Image>,
        spec: &TokenizerSpec,
        rng: &mut R,
    ) -> Result<(Self, CodebookReport)> {
        let bpe = BpeModel::train(&TokenCorpus::text_fields(records), spec.text_vocab)?;
        let paths: BTreeSet<&str> = records
            .iter()
            .flat_map(|r| {
                let mut refs = r.image_refs();
                refs.extend(r.image.as_deref());
                refs
            })
            .collect();
        let side = spec.image_side;
        let imgs = paths
            .into_iter()
            .map(|p| {
                let img = images(p)?;
                if img.width() == side && img.height() == side {
                    Ok(img)
                } else {
                    img.center_crop(side)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let (codebook, report) = train_codebook(&imgs, spec.codebook_size, spec.patch, spec.kmeans_iters, rng)?;
        let vocab = MixedVocab::new(bpe.vocab_size(), codebook.size());
        Ok((
            Tokenizers {
                bpe,
                codebook,
                vocab,
                image_side: side,
            },
            report,
        ))
    }

    pub fn encoder(&self) -> MixedEncoder<'_> {
        MixedEncoder {
            bpe: &self.bpe,
            codebook: &self.codebook,
            vocab: self.vocab,
            image_side: self.image_side,
        }
    }

    pub fn tokens_per_image(&self) -> usize {
        self.encoder().tokens_per_image()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        self.bpe.save(&dir.join("bpe.txt"))?;
        self.codebook.save(&dir.join("codebook.bin"))?;
        let mut kv = KeyValues::new();
        kv.set("text_vocab", self.vocab.text_size());
        kv.set("codebook_size", self.vocab.codebook_size());
        kv.set("image_side", self.image_side);
        kv.write(&dir.join("tokenizer"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let kv = KeyValues::read(&dir.join("tokenizer"))?;
        let bpe = BpeModel::load(&dir.join("bpe.txt"))?;
        let codebook = Codebook::load(&dir.join("codebook.bin"))?;
        let t: usize = kv.get_parsed("text_vocab")?;
        let c: usize = kv.get_parsed("codebook_size")?;
        if t != bpe.vocab_size() || c != codebook.size() {
            return Err(Error::format(
                dir.join("tokenizer"),
                format!(
                    "sizes {t}/{c} disagree with bpe.txt ({}) and codebook.bin ({})",
                    bpe.vocab_size(),
                    codebook.size()
                ),
            ));
        }
        Ok(Tokenizers {
            bpe,
            codebook,
            vocab: MixedVocab::new(t, c),
            image_side: kv.get_parsed("image_side")?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::{generate, SyntheticSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn train_save_load() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = SyntheticSpec {
            text_docs: 20,
            pairs: 10,
            interleaved: 3,
            curated: 3,
            sft: 4,
            ..SyntheticSpec::default()
        };
        let corpus = generate(&spec, &mut rng).unwrap();
        let lookup = |p: &str| corpus.image(p);
        let (tok, report) = Tokenizers::train(&corpus.records, &lookup, &TokenizerSpec::default(), &mut rng).unwrap();
        assert!(tok.vocab.text_size() <= 320);
        assert_eq!(tok.tokens_per_image(), 16);
        assert!(report.mse_history.windows(2).all(|w| w[1] <= w[0]));
        let dir = tempfile::tempdir().unwrap();
        tok.save(dir.path()).unwrap();
        assert_eq!(Tokenizers::load(dir.path()).unwrap(), tok);
        let enc = TokenCorpus::encode(&corpus.records, &tok.encoder(), &lookup).unwrap();
        assert_eq!(enc.sft.len(), 4);
        assert_eq!(enc.sources["curated"].len(), 3);
    }
}
