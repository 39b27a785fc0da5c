//! Newline-delimited JSON corpora and their conversion to token sequences.
//!
//! Each line is one record:
//!
//! ```text
//! {"kind":"text","text":"..."}
//! {"kind":"pair","image":"images/a.ppm","text":"a caption"}
//! {"kind":"interleaved","text":"before <image:images/b.ppm> after"}
//! {"kind":"sft","prompt":"...","answer":"<image:images/c.ppm>"}
//! ```
//!
//! `<image:path>` inlines an image inside any text field. An optional
//! `source` field overrides the mixture source, which otherwise follows the
//! kind (`text`, `text-image`, `interleaved`).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::sft::PairedExample;
use crate::error::{Error, Result};
use crate::tokenizer::{encode_image, BpeModel, Codebook, Image, MixedVocab};
use crate::TokenId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordKind {
    Text,
    Pair,
    Interleaved,
    Sft,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub kind: RecordKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

impl CorpusRecord {
    pub fn source_name(&self) -> &str {
        if let Some(s) = &self.source {
            return s;
        }
        match self.kind {
            RecordKind::Text => "text",
            RecordKind::Pair => "text-image",
            RecordKind::Interleaved => "interleaved",
            RecordKind::Sft => "sft",
        }
    }

    /// Every image path the record refers to.
    pub fn image_refs(&self) -> Vec<&str> {
        let mut out: Vec<&str> = self.image.iter().map(String::as_str).collect();
        for field in [&self.text, &self.prompt, &self.answer].into_iter().flatten() {
            out.extend(split_segments(field).into_iter().filter_map(|s| match s {
                Segment::Image(p) => Some(p),
                Segment::Text(_) => None,
            }));
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Segment<'a> {
    Text(&'a str),
    Image(&'a str),
}

const MARK_OPEN: &str = "<image:";

/// Splits a field on `<image:path>` markers.
pub fn split_segments(s: &str) -> Vec<Segment<'_>> {
    let mut out = Vec::new();
    let mut rest = s;
    while let Some(i) = rest.find(MARK_OPEN) {
        let after = &rest[i + MARK_OPEN.len()..];
        let Some(j) = after.find('>') else { break };
        if i > 0 {
            out.push(Segment::Text(&rest[..i]));
        }
        out.push(Segment::Image(&after[..j]));
        rest = &after[j + 1..];
    }
    if !rest.is_empty() {
        out.push(Segment::Text(rest));
    }
    out
}

pub fn parse_jsonl(text: &str) -> Result<Vec<CorpusRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let rec: CorpusRecord = serde_json::from_str(l).map_err(|e| Error::Parse {
                line: i + 1,
                reason: e.to_string(),
            })?;
            let need = |f: &Option<String>, name: &str| {
                f.as_ref().map(|_| ()).ok_or_else(|| Error::Parse {
                    line: i + 1,
                    reason: format!("{:?} record needs `{name}`", rec.kind),
                })
            };
            match rec.kind {
                RecordKind::Text | RecordKind::Interleaved => need(&rec.text, "text")?,
                RecordKind::Pair => {
                    need(&rec.text, "text")?;
                    need(&rec.image, "image")?;
                }
                RecordKind::Sft => {
                    need(&rec.prompt, "prompt")?;
                    need(&rec.answer, "answer")?;
                }
            }
            Ok(rec)
        })
        .collect()
}

pub fn to_jsonl(records: &[CorpusRecord]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("records serialise") + "\n")
        .collect()
}

/// Reads one `.jsonl` file, or every `.jsonl` file of a directory in name
/// order. Image paths are resolved relative to the containing directory.
pub fn read_corpus(path: &Path) -> Result<(PathBuf, Vec<CorpusRecord>)> {
    let files: Vec<PathBuf> = if path.is_dir() {
        let mut v: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| Error::io(format!("listing {}", path.display()), e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect();
        v.sort();
        v
    } else {
        vec![path.to_path_buf()]
    };
    let base = if path.is_dir() {
        path.to_path_buf()
    } else {
        path.parent().map(Path::to_path_buf).unwrap_or_default()
    };
    let mut records = Vec::new();
    for f in &files {
        let text = fs::read_to_string(f).map_err(|e| Error::io(format!("reading {}", f.display()), e))?;
        records.extend(parse_jsonl(&text).map_err(|e| Error::format(f, e.to_string()))?);
    }
    if records.is_empty() {
        return Err(Error::Empty(format!("no corpus records under {}", path.display())));
    }
    Ok((base, records))
}

/// How to bring an image to the tokenizer's square size.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImagePrep {
    CenterCrop,
    /// Pads with white to keep the whole image.
    Letterbox,
}

/// Text + image tokenizers bundled with the shared vocabulary.
#[derive(Clone, Copy, Debug)]
pub struct MixedEncoder<'a> {
    pub bpe: &'a BpeModel,
    pub codebook: &'a Codebook,
    pub vocab: MixedVocab,
    pub image_side: usize,
}

impl MixedEncoder<'_> {
    pub fn tokens_per_image(&self) -> usize {
        crate::tokenizer::tokens_per_image(self.image_side, self.codebook.patch())
    }

    /// Bare codebook tokens of one image.
    pub fn image_codes(&self, img: &Image, prep: ImagePrep) -> Result<Vec<TokenId>> {
        let side = self.image_side;
        let img = if img.width() == side && img.height() == side {
            img.clone()
        } else {
            match prep {
                ImagePrep::CenterCrop => img.center_crop(side)?,
                ImagePrep::Letterbox => img.letterbox(side, 1.0)?,
            }
        };
        encode_image(&img, self.codebook, &self.vocab)
    }

    /// Text tokens with each `<image:…>` replaced by a `BOI … EOI` block.
    pub fn encode_field(
        &self,
        field: &str,
        images: &dyn Fn(&str) -> Result<Image>,
        prep: ImagePrep,
    ) -> Result<Vec<TokenId>> {
        let mut out = Vec::new();
        for seg in split_segments(field) {
            match seg {
                Segment::Text(t) => out.extend(self.bpe.encode_str(t)),
                Segment::Image(p) => {
                    out.push(self.vocab.boi());
                    out.extend(self.image_codes(&images(p)?, prep)?);
                    out.push(self.vocab.eoi());
                }
            }
        }
        Ok(out)
    }
}

/// One pre-training item in token space.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SourceItem {
    /// A ready sequence (text-only or interleaved).
    Doc(Vec<TokenId>),
    /// An image and its caption; their order is drawn at sampling time.
    Pair { image: Vec<TokenId>, text: Vec<TokenId> },
}

/// A tokenized corpus grouped by mixture source, plus SFT examples.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TokenCorpus {
    pub sources: BTreeMap<String, Vec<SourceItem>>,
    pub sft: Vec<PairedExample>,
}

impl TokenCorpus {
    pub fn encode(
        records: &[CorpusRecord],
        enc: &MixedEncoder<'_>,
        images: &dyn Fn(&str) -> Result<Image>,
    ) -> Result<Self> {
        let mut c = TokenCorpus::default();
        for r in records {
            let field = |f: &Option<String>| f.clone().unwrap_or_default();
            match r.kind {
                RecordKind::Text | RecordKind::Interleaved => {
                    let doc = enc.encode_field(&field(&r.text), images, ImagePrep::CenterCrop)?;
                    c.push(r.source_name(), SourceItem::Doc(doc));
                }
                RecordKind::Pair => {
                    let img = images(r.image.as_deref().unwrap_or_default())?;
                    let item = SourceItem::Pair {
                        image: enc.image_codes(&img, ImagePrep::CenterCrop)?,
                        text: enc.bpe.encode_str(&field(&r.text)),
                    };
                    c.push(r.source_name(), item);
                }
                RecordKind::Sft => c.sft.push(PairedExample {
                    prompt: enc.encode_field(&field(&r.prompt), images, ImagePrep::Letterbox)?,
                    answer: enc.encode_field(&field(&r.answer), images, ImagePrep::CenterCrop)?,
                }),
            }
        }
        Ok(c)
    }

    fn push(&mut self, source: &str, item: SourceItem) {
        self.sources.entry(source.to_string()).or_default().push(item);
    }

    /// Every text field of the records, for BPE training.
    pub fn text_fields(records: &[CorpusRecord]) -> Vec<String> {
        let mut out = Vec::new();
        for r in records {
            for f in [&r.text, &r.prompt, &r.answer].into_iter().flatten() {
                for s in split_segments(f) {
                    if let Segment::Text(t) = s {
                        out.push(t.to_string());
                    }
                }
            }
        }
        out
    }
}

/// Loads images relative to `base`.
pub fn disk_images(base: &Path) -> impl Fn(&str) -> Result<Image> + '_ {
    move |p: &str| Image::load(&base.join(p))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn markers_split_in_order() {
        let s = split_segments("a <image:x.ppm> b<image:y.ppm>");
        assert_eq!(
            s,
            vec![
                Segment::Text("a "),
                Segment::Image("x.ppm"),
                Segment::Text(" b"),
                Segment::Image("y.ppm"),
            ]
        );
        assert_eq!(split_segments("<image:broken"), vec![Segment::Text("<image:broken")]);
    }

    #[test]
    fn jsonl_round_trip_and_line_numbers() {
        let text = "{\"kind\":\"text\",\"text\":\"hi\"}\n\n{\"kind\":\"pair\",\"image\":\"a.ppm\",\"text\":\"cap\"}\n";
        let recs = parse_jsonl(text).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[1].source_name(), "text-image");
        assert_eq!(parse_jsonl(&to_jsonl(&recs)).unwrap(), recs);
        match parse_jsonl("{\"kind\":\"text\",\"text\":\"ok\"}\n{\"kind\":\"pair\",\"text\":\"x\"}") {
            Err(Error::Parse { line: 2, .. }) => {}
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_jsonl("{nope"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn encoding_inlines_image_blocks() {
        let bpe = BpeModel::train(&["hello there"], 260).unwrap();
        let cb = Codebook::new(2, 2, 1, vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]).unwrap();
        let vocab = MixedVocab::new(bpe.vocab_size(), 2);
        let enc = MixedEncoder {
            bpe: &bpe,
            codebook: &cb,
            vocab,
            image_side: 4,
        };
        let white = |_: &str| Image::filled(4, 4, &[1.0]);
        let toks = enc.encode_field("hi <image:w>", &white, ImagePrep::CenterCrop).unwrap();
        let img = vocab.image_token(1).unwrap();
        assert_eq!(&toks[toks.len() - 6..], &[vocab.boi(), img, img, img, img, vocab.eoi()]);
        vocab.check_blocks(&toks, 4, false).unwrap();
    }
}
