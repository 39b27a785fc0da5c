use std::fmt;
use std::ops::Range;

use crate::error::{Error, Result};
use crate::TokenId;

/// Control tokens, laid out in this order above the image range.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Special {
    Bos,
    Eos,
    Pad,
    /// Separates an SFT prompt from its answer.
    Sep,
    /// Begin-of-image.
    Boi,
    /// End-of-image.
    Eoi,
}

pub const SPECIAL_COUNT: usize = 6;

impl Special {
    pub const ALL: [Special; SPECIAL_COUNT] = [
        Special::Bos,
        Special::Eos,
        Special::Pad,
        Special::Sep,
        Special::Boi,
        Special::Eoi,
    ];

    fn offset(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Special::Bos => "BOS",
            Special::Eos => "EOS",
            Special::Pad => "PAD",
            Special::Sep => "SEP",
            Special::Boi => "BOI",
            Special::Eoi => "EOI",
        }
    }
}

impl fmt::Display for Special {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TokenClass {
    Text,
    Image,
    Special(Special),
}

/// Partition of the id space: text `[0, T)`, image codebook `[T, T + C)`,
/// then the specials.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MixedVocab {
    text_size: usize,
    codebook_size: usize,
}

impl MixedVocab {
    pub fn new(text_size: usize, codebook_size: usize) -> Self {
        MixedVocab {
            text_size,
            codebook_size,
        }
    }

    pub fn text_size(&self) -> usize {
        self.text_size
    }

    pub fn codebook_size(&self) -> usize {
        self.codebook_size
    }

    pub fn total_size(&self) -> usize {
        self.text_size + self.codebook_size + SPECIAL_COUNT
    }

    pub fn text_range(&self) -> Range<TokenId> {
        0..self.text_size as TokenId
    }

    pub fn image_range(&self) -> Range<TokenId> {
        self.text_size as TokenId..(self.text_size + self.codebook_size) as TokenId
    }

    pub fn special(&self, s: Special) -> TokenId {
        (self.text_size + self.codebook_size + s.offset()) as TokenId
    }

    pub fn bos(&self) -> TokenId {
        self.special(Special::Bos)
    }

    pub fn eos(&self) -> TokenId {
        self.special(Special::Eos)
    }

    pub fn pad(&self) -> TokenId {
        self.special(Special::Pad)
    }

    pub fn sep(&self) -> TokenId {
        self.special(Special::Sep)
    }

    pub fn boi(&self) -> TokenId {
        self.special(Special::Boi)
    }

    pub fn eoi(&self) -> TokenId {
        self.special(Special::Eoi)
    }

    /// Token id of codebook entry `code`.
    pub fn image_token(&self, code: usize) -> Result<TokenId> {
        if code >= self.codebook_size {
            return Err(Error::TokenOutOfRange {
                id: code as TokenId,
                size: self.codebook_size,
            });
        }
        Ok((self.text_size + code) as TokenId)
    }

    /// Codebook index of an image token.
    pub fn image_code(&self, id: TokenId) -> Option<usize> {
        self.image_range()
            .contains(&id)
            .then(|| id as usize - self.text_size)
    }

    pub fn is_text(&self, id: TokenId) -> bool {
        self.text_range().contains(&id)
    }

    pub fn is_image(&self, id: TokenId) -> bool {
        self.image_range().contains(&id)
    }

    /// Checks that image tokens only occur inside `BOI … EOI` blocks of
    /// exactly `k` tokens and that every block is closed. With
    /// `allow_open_tail`, the sequence may end inside a block.
    pub fn check_blocks(&self, tokens: &[TokenId], k: usize, allow_open_tail: bool) -> Result<()> {
        let mut open: Option<(usize, usize)> = None;
        for (i, &t) in tokens.iter().enumerate() {
            let bad = |reason: String| Error::MalformedBlock { offset: i, reason };
            match (self.classify(t)?, open) {
                (TokenClass::Special(Special::Boi), None) => open = Some((i, 0)),
                (TokenClass::Special(Special::Boi), Some((start, _))) => {
                    return Err(bad(format!("BOI inside the block opened at {start}")))
                }
                (TokenClass::Image, Some((start, n))) if n < k => open = Some((start, n + 1)),
                (TokenClass::Image, Some((start, _))) => {
                    return Err(bad(format!("block opened at {start} exceeds {k} image tokens")))
                }
                (TokenClass::Image, None) => return Err(bad("image token outside a block".into())),
                (TokenClass::Special(Special::Eoi), Some((_, n))) if n == k => open = None,
                (TokenClass::Special(Special::Eoi), Some((start, n))) => {
                    return Err(bad(format!("block opened at {start} has {n} of {k} image tokens")))
                }
                (TokenClass::Special(Special::Eoi), None) => {
                    return Err(bad("EOI without an open block".into()))
                }
                (_, Some((start, _))) => {
                    return Err(bad(format!("non-image token inside the block opened at {start}")))
                }
                (_, None) => {}
            }
        }
        match open {
            Some((start, _)) if !allow_open_tail => Err(Error::MalformedBlock {
                offset: start,
                reason: "image block is never closed".into(),
            }),
            _ => Ok(()),
        }
    }

    pub fn classify(&self, id: TokenId) -> Result<TokenClass> {
        let i = id as usize;
        if i < self.text_size {
            Ok(TokenClass::Text)
        } else if i < self.text_size + self.codebook_size {
            Ok(TokenClass::Image)
        } else if i < self.total_size() {
            Ok(TokenClass::Special(
                Special::ALL[i - self.text_size - self.codebook_size],
            ))
        } else {
            Err(Error::TokenOutOfRange {
                id,
                size: self.total_size(),
            })
        }
    }
}
