//! A small procedurally generated mixed-modal corpus.
//!
//! Images are squares split into four flat-coloured quadrants; captions name
//! the four colours in reading order, so text and image content are tied
//! together and a toy model has something to learn in both directions.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng;

use super::corpus::{to_jsonl, CorpusRecord, RecordKind};
use crate::error::{Error, Result};
use crate::numerics::Scalar;
use crate::tokenizer::Image;

pub const PALETTE: [(&str, [Scalar; 3]); 6] = [
    ("red", [1.0, 0.0, 0.0]),
    ("green", [0.0, 1.0, 0.0]),
    ("blue", [0.0, 0.0, 1.0]),
    ("yellow", [1.0, 1.0, 0.0]),
    ("white", [1.0, 1.0, 1.0]),
    ("black", [0.0, 0.0, 0.0]),
];

const NOUNS: [&str; 6] = ["cat", "dog", "box", "kite", "cup", "hat"];
const VERBS: [&str; 4] = ["sees", "likes", "finds", "holds"];

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub text_docs: usize,
    pub pairs: usize,
    pub interleaved: usize,
    pub curated: usize,
    pub sft: usize,
    pub image_side: usize,
    /// 1 (grey levels) or 3 (RGB).
    pub channels: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            text_docs: 200,
            pairs: 200,
            interleaved: 60,
            curated: 60,
            sft: 80,
            image_side: 16,
            channels: 3,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SyntheticCorpus {
    pub records: Vec<CorpusRecord>,
    /// Images keyed by the relative path used in the records.
    pub images: BTreeMap<String, Image>,
}

fn colour(i: usize, channels: usize) -> Vec<Scalar> {
    let rgb = PALETTE[i].1;
    if channels == 1 {
        vec![i as Scalar / (PALETTE.len() - 1) as Scalar]
    } else {
        rgb.to_vec()
    }
}

/// A `side×side` image whose quadrants (reading order) take the given
/// palette colours.
pub fn quadrant_image(colours: [usize; 4], side: usize, channels: usize) -> Result<Image> {
    if side % 2 != 0 || side == 0 {
        return Err(Error::config("quadrant images need an even side"));
    }
    let half = side / 2;
    let mut data = Vec::with_capacity(side * side * channels);
    for y in 0..side {
        for x in 0..side {
            let q = (y / half) * 2 + x / half;
            data.extend(colour(colours[q], channels));
        }
    }
    Image::new(side, side, channels, data)
}

pub fn caption(colours: [usize; 4]) -> String {
    let n: Vec<&str> = colours.iter().map(|&c| PALETTE[c].0).collect();
    format!("{} {} {} {}", n[0], n[1], n[2], n[3])
}

fn sentence<R: Rng + ?Sized>(rng: &mut R) -> String {
    let c = |r: &mut R| PALETTE.choose(r).expect("palette").0;
    let n = |r: &mut R| *NOUNS.choose(r).expect("nouns");
    format!(
        "the {} {} {} the {} {}.",
        c(rng),
        n(rng),
        VERBS.choose(rng).expect("verbs"),
        c(rng),
        n(rng)
    )
}

/// Generates the corpus; deterministic given the random stream.
pub fn generate<R: Rng + ?Sized>(spec: &SyntheticSpec, rng: &mut R) -> Result<SyntheticCorpus> {
    let mut c = SyntheticCorpus::default();
    let new_image = |c: &mut SyntheticCorpus, rng: &mut R| -> Result<(String, [usize; 4])> {
        let cols = [0; 4].map(|_| rng.random_range(0..PALETTE.len()));
        let name = format!("images/img_{:05}.ppm", c.images.len());
        c.images.insert(name.clone(), quadrant_image(cols, spec.image_side, spec.channels)?);
        Ok((name, cols))
    };
    let rec = |kind| CorpusRecord {
        kind,
        text: None,
        image: None,
        prompt: None,
        answer: None,
        source: None,
    };
    for _ in 0..spec.text_docs {
        let n = rng.random_range(1..=3);
        let text = (0..n).map(|_| sentence(rng)).collect::<Vec<_>>().join(" ");
        c.records.push(CorpusRecord {
            text: Some(text),
            ..rec(RecordKind::Text)
        });
    }
    for _ in 0..spec.pairs {
        let (img, cols) = new_image(&mut c, rng)?;
        c.records.push(CorpusRecord {
            text: Some(caption(cols)),
            image: Some(img),
            ..rec(RecordKind::Pair)
        });
    }
    for _ in 0..spec.interleaved {
        let (a, ca) = new_image(&mut c, rng)?;
        let (b, cb) = new_image(&mut c, rng)?;
        c.records.push(CorpusRecord {
            text: Some(format!("{} <image:{a}> then {} <image:{b}>", caption(ca), caption(cb))),
            ..rec(RecordKind::Interleaved)
        });
    }
    for _ in 0..spec.curated {
        let (img, cols) = new_image(&mut c, rng)?;
        c.records.push(CorpusRecord {
            text: Some(format!("a picture of {}.", caption(cols))),
            image: Some(img),
            source: Some("curated".into()),
            ..rec(RecordKind::Pair)
        });
    }
    for i in 0..spec.sft {
        let (img, cols) = new_image(&mut c, rng)?;
        let (prompt, answer) = if i % 2 == 0 {
            (format!("draw {}", caption(cols)), format!("<image:{img}>"))
        } else {
            (format!("<image:{img}> describe"), caption(cols))
        };
        c.records.push(CorpusRecord {
            prompt: Some(prompt),
            answer: Some(answer),
            ..rec(RecordKind::Sft)
        });
    }
    Ok(c)
}

impl SyntheticCorpus {
    pub fn image(&self, path: &str) -> Result<Image> {
        self.images
            .get(path)
            .cloned()
            .ok_or_else(|| Error::Empty(format!("no image `{path}` in the corpus")))
    }

    /// Writes `corpus.jsonl` and the images below `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let io = |p: &Path, e| Error::io(format!("writing {}", p.display()), e);
        fs::create_dir_all(dir.join("images")).map_err(|e| io(dir, e))?;
        let path = dir.join("corpus.jsonl");
        fs::write(&path, to_jsonl(&self.records)).map_err(|e| io(&path, e))?;
        for (name, img) in &self.images {
            img.save(&dir.join(name))?;
        }
        Ok(())
    }

    pub fn all_images(&self) -> Vec<Image> {
        self.images.values().cloned().collect()
    }
}
