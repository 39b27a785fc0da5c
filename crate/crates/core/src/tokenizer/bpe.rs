//! Byte-level BPE.
//!
//! Ids `0..256` are raw bytes; merge `r` creates id `256 + r`. Text is split
//! into chunks before merging; a chunk is a run of whitespace followed by a
//! run of non-whitespace, so merges never cross word boundaries. Because every
//! byte has an id, any byte string encodes.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::TokenId;

pub const BYTE_ALPHABET: usize = 256;

const HEADER: &str = "# bpe merges v1: rank left right";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BpeModel {
    merges: Vec<(TokenId, TokenId)>,
    ranks: HashMap<(TokenId, TokenId), usize>,
    pieces: Vec<Vec<u8>>,
}

fn chunks(bytes: &[u8]) -> Vec<&[u8]> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..bytes.len() {
        let ws_prev = bytes[i - 1].is_ascii_whitespace();
        let ws_cur = bytes[i].is_ascii_whitespace();
        if ws_cur && !ws_prev {
            out.push(&bytes[start..i]);
            start = i;
        }
    }
    if start < bytes.len() {
        out.push(&bytes[start..]);
    }
    out
}

impl BpeModel {
    fn from_merges(merges: Vec<(TokenId, TokenId)>) -> Result<Self> {
        let mut pieces: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        let mut ranks = HashMap::with_capacity(merges.len());
        for (r, &(a, b)) in merges.iter().enumerate() {
            let limit = (BYTE_ALPHABET + r) as TokenId;
            if a >= limit || b >= limit {
                return Err(Error::config(format!(
                    "merge {r} references id beyond {limit}"
                )));
            }
            let mut p = pieces[a as usize].clone();
            p.extend_from_slice(&pieces[b as usize]);
            pieces.push(p);
            ranks.insert((a, b), r);
        }
        Ok(BpeModel {
            merges,
            ranks,
            pieces,
        })
    }

    /// Learns up to `vocab_size - 256` merges from `corpus`, most frequent
    /// pair first (ties go to the smallest id pair). Stops early when no
    /// pair occurs twice.
    pub fn train<S: AsRef<[u8]>>(corpus: &[S], vocab_size: usize) -> Result<Self> {
        if vocab_size < BYTE_ALPHABET {
            return Err(Error::config(format!(
                "text vocabulary {vocab_size} is smaller than the {BYTE_ALPHABET}-byte alphabet"
            )));
        }
        if corpus.iter().all(|s| s.as_ref().is_empty()) {
            return Err(Error::Empty("BPE training corpus".into()));
        }
        let mut freq: HashMap<&[u8], usize> = HashMap::new();
        for doc in corpus {
            for c in chunks(doc.as_ref()) {
                *freq.entry(c).or_default() += 1;
            }
        }
        let mut words: Vec<(Vec<TokenId>, usize)> = freq
            .into_iter()
            .map(|(w, n)| (w.iter().map(|&b| b as TokenId).collect(), n))
            .collect();
        words.sort();

        let mut merges = Vec::new();
        while BYTE_ALPHABET + merges.len() < vocab_size {
            let mut counts: HashMap<(TokenId, TokenId), usize> = HashMap::new();
            for (w, n) in &words {
                for p in w.windows(2) {
                    *counts.entry((p[0], p[1])).or_default() += n;
                }
            }
            let Some((&best, &count)) = counts
                .iter()
                .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)))
            else {
                break;
            };
            if count < 2 {
                break;
            }
            let new_id = (BYTE_ALPHABET + merges.len()) as TokenId;
            for (w, _) in &mut words {
                merge_pair(w, best, new_id);
            }
            merges.push(best);
        }
        Self::from_merges(merges)
    }

    /// Number of text ids, `256 + merges`.
    pub fn vocab_size(&self) -> usize {
        self.pieces.len()
    }

    pub fn merges(&self) -> &[(TokenId, TokenId)] {
        &self.merges
    }

    /// Bytes spelled by one token.
    pub fn piece(&self, id: TokenId) -> Option<&[u8]> {
        self.pieces.get(id as usize).map(Vec::as_slice)
    }

    pub fn encode(&self, text: &[u8]) -> Vec<TokenId> {
        let mut out = Vec::with_capacity(text.len());
        for c in chunks(text) {
            let mut syms: Vec<TokenId> = c.iter().map(|&b| b as TokenId).collect();
            loop {
                let best = syms
                    .windows(2)
                    .filter_map(|p| self.ranks.get(&(p[0], p[1])).map(|&r| (r, (p[0], p[1]))))
                    .min();
                let Some((r, pair)) = best else { break };
                merge_pair(&mut syms, pair, (BYTE_ALPHABET + r) as TokenId);
            }
            out.extend(syms);
        }
        out
    }

    pub fn encode_str(&self, text: &str) -> Vec<TokenId> {
        self.encode(text.as_bytes())
    }

    /// Concatenates the bytes of each token. Ids outside the text range are
    /// an error.
    pub fn decode(&self, ids: &[TokenId]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &id in ids {
            let p = self.piece(id).ok_or(Error::TokenOutOfRange {
                id,
                size: self.vocab_size(),
            })?;
            out.extend_from_slice(p);
        }
        Ok(out)
    }

    pub fn decode_lossy(&self, ids: &[TokenId]) -> Result<String> {
        Ok(String::from_utf8_lossy(&self.decode(ids)?).into_owned())
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{HEADER}\n");
        for (r, (a, b)) in self.merges.iter().enumerate() {
            s.push_str(&format!("{r} {a} {b}\n"));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut merges = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |reason: &str| Error::Parse {
                line: i + 1,
                reason: reason.to_string(),
            };
            let nums: Vec<usize> = line
                .split_whitespace()
                .map(|f| f.parse().map_err(|_| bad("non-integer field")))
                .collect::<Result<_>>()?;
            let [rank, a, b] = nums[..] else {
                return Err(bad("expected `rank left right`"));
            };
            if rank != merges.len() {
                return Err(bad("ranks must be consecutive from 0"));
            }
            merges.push((a as TokenId, b as TokenId));
        }
        Self::from_merges(merges)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_text(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}

fn merge_pair(w: &mut Vec<TokenId>, pair: (TokenId, TokenId), new_id: TokenId) {
    let mut out = Vec::with_capacity(w.len());
    let mut i = 0;
    while i < w.len() {
        if i + 1 < w.len() && (w[i], w[i + 1]) == pair {
            out.push(new_id);
            i += 2;
        } else {
            out.push(w[i]);
            i += 1;
        }
    }
    *w = out;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_merge_of_repeated_letter() {
        let m = BpeModel::train(&["aaaaaaaa"], 260).unwrap();
        assert_eq!(m.merges()[0], (b'a' as TokenId, b'a' as TokenId));
    }

    #[test]
    fn empty_string_encodes_to_nothing() {
        let m = BpeModel::train(&["hello hello"], 300).unwrap();
        assert!(m.encode(b"").is_empty());
    }

    #[test]
    fn vocab_below_alphabet_is_rejected() {
        assert!(BpeModel::train(&["abc"], 100).is_err());
    }

    #[test]
    fn merges_compress_frequent_words() {
        let corpus = ["the cat sat on the mat the cat"];
        let m = BpeModel::train(&corpus, 300).unwrap();
        let ids = m.encode_str("the cat");
        assert!(ids.len() < 7);
        assert_eq!(m.decode(&ids).unwrap(), b"the cat");
    }

    #[test]
    fn text_file_round_trip() {
        let m = BpeModel::train(&["abababab cdcdcd abab"], 270).unwrap();
        let back = BpeModel::from_text(&m.to_text()).unwrap();
        assert_eq!(back, m);
        assert!(BpeModel::from_text("1 2 3").is_err());
        assert!(BpeModel::from_text("0 300 1").is_err());
    }

    #[test]
    fn chunking_keeps_every_byte() {
        let s = b"  lead, mid\n\ttrail  ";
        let joined: Vec<u8> = chunks(s).concat();
        assert_eq!(joined, s);
    }
}
