//! Patch-wise vector quantisation: a k-means codebook over flattened `p×p`
//! pixel patches, and the image <-> token-block mapping built on it.

use std::collections::HashSet;
use std::io::Read;
use std::path::Path;

use rand::Rng;

use super::image::Image;
use super::vocab::MixedVocab;
use crate::error::{Error, Result};
use crate::numerics::Scalar;
use crate::TokenId;

const MAGIC: &[u8; 4] = b"CHCB";
const FILE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    size: usize,
    patch: usize,
    channels: usize,
    vectors: Vec<Scalar>,
}

/// Diagnostics from [`train_codebook`].
#[derive(Clone, Debug, PartialEq)]
pub struct CodebookReport {
    /// Quantisation MSE measured at each assignment step.
    pub mse_history: Vec<Scalar>,
    pub distinct_patches: usize,
    /// Set when `C` exceeded the number of distinct patches and the codebook
    /// was padded with jittered duplicates.
    pub padded: bool,
}

fn sq_dist(a: &[Scalar], b: &[Scalar]) -> Scalar {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl Codebook {
    pub fn new(size: usize, patch: usize, channels: usize, vectors: Vec<Scalar>) -> Result<Self> {
        if size == 0 || patch == 0 || (channels != 1 && channels != 3) {
            return Err(Error::config(format!(
                "invalid codebook geometry: C={size}, p={patch}, channels={channels}"
            )));
        }
        if vectors.len() != size * patch * patch * channels {
            return Err(Error::shape(format!(
                "codebook of {size} x {} needs {} values, got {}",
                patch * patch * channels,
                size * patch * patch * channels,
                vectors.len()
            )));
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("codebook contains non-finite entries".into()));
        }
        Ok(Codebook {
            size,
            patch,
            channels,
            vectors,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn patch(&self) -> usize {
        self.patch
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn vector(&self, code: usize) -> &[Scalar] {
        &self.vectors[code * self.dim()..(code + 1) * self.dim()]
    }

    /// Closest codeword (squared Euclidean), ties to the lowest index.
    pub fn nearest(&self, patch: &[Scalar]) -> (usize, Scalar) {
        let mut best = (0, Scalar::INFINITY);
        for c in 0..self.size {
            let d = sq_dist(patch, self.vector(c));
            if d < best.1 {
                best = (c, d);
            }
        }
        best
    }

    /// Binary layout: magic `CHCB`, then little-endian u32 version, C, p,
    /// channels, followed by `C × p·p·channels` little-endian f64 values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        for h in [FILE_VERSION, self.size as u32, self.patch as u32, self.channels as u32] {
            out.extend_from_slice(&h.to_le_bytes());
        }
        for &v in &self.vectors {
            out.extend_from_slice(&(v as f64).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |r: String| Error::Domain(format!("codebook file: {r}"));
        if bytes.len() < 20 || &bytes[..4] != MAGIC {
            return Err(bad("missing magic header".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        if word(0) != FILE_VERSION {
            return Err(bad(format!("version {} unsupported", word(0))));
        }
        let (size, patch, channels) = (word(1) as usize, word(2) as usize, word(3) as usize);
        let body = &bytes[20..];
        let expect = size * patch * patch * channels * 8;
        if body.len() != expect {
            return Err(bad(format!("length mismatch: expected {expect} bytes, got {}", body.len())));
        }
        let vectors = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()) as Scalar)
            .collect();
        Codebook::new(size, patch, channels, vectors)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_bytes(&buf).map_err(|e| Error::format(path, e.to_string()))
    }
}

fn assign(points: &[Vec<Scalar>], cents: &[Vec<Scalar>], labels: &mut [usize]) -> Scalar {
    let mut total = 0.0;
    for (p, l) in points.iter().zip(labels.iter_mut()) {
        let mut best = (0, Scalar::INFINITY);
        for (c, cv) in cents.iter().enumerate() {
            let d = sq_dist(p, cv);
            if d < best.1 {
                best = (c, d);
            }
        }
        *l = best.0;
        total += best.1;
    }
    total / (points.len() * points[0].len()) as Scalar
}

fn kmeans_pp<R: Rng + ?Sized>(points: &[Vec<Scalar>], k: usize, rng: &mut R) -> Vec<Vec<Scalar>> {
    let mut cents = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<Scalar> = points.iter().map(|p| sq_dist(p, &cents[0])).collect();
    while cents.len() < k {
        let total: Scalar = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<Scalar>() * total;
            let mut pick = points.len() - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            // Guard against rounding landing on an already-chosen point.
            if d2[pick] == 0.0 {
                pick = d2.iter().rposition(|&d| d > 0.0).unwrap_or(pick);
            }
            pick
        } else {
            rng.random_range(0..points.len())
        };
        cents.push(points[next].clone());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &cents[cents.len() - 1]));
        }
    }
    cents
}

/// Lloyd's k-means over every `p×p` patch of the corpus with k-means++
/// seeding. Empty clusters keep their previous centroid.
pub fn train_codebook<R: Rng + ?Sized>(
    images: &[Image],
    size: usize,
    patch: usize,
    iters: usize,
    rng: &mut R,
) -> Result<(Codebook, CodebookReport)> {
    let first = images
        .first()
        .ok_or_else(|| Error::Empty("codebook training corpus".into()))?;
    let channels = first.channels();
    let mut points = Vec::new();
    for img in images {
        if img.channels() != channels {
            return Err(Error::shape("codebook corpus mixes channel counts"));
        }
        points.extend(img.patches(patch)?);
    }
    if size == 0 {
        return Err(Error::config("codebook size must be positive"));
    }
    let distinct: Vec<Vec<Scalar>> = {
        let mut seen = HashSet::new();
        points
            .iter()
            .filter(|p| seen.insert(p.iter().map(|v| v.to_bits()).collect::<Vec<_>>()))
            .cloned()
            .collect()
    };

    let padded = size > distinct.len();
    let mut cents = if padded {
        let mut c = distinct.clone();
        while c.len() < size {
            let base = &distinct[c.len() % distinct.len()];
            c.push(base.iter().map(|v| v + (rng.random::<Scalar>() - 0.5) * 1e-3).collect());
        }
        c
    } else {
        kmeans_pp(&distinct, size, rng)
    };

    let dim = points[0].len();
    let mut labels = vec![0usize; points.len()];
    let mut history = Vec::with_capacity(iters + 1);
    for _ in 0..iters {
        history.push(assign(&points, &cents, &mut labels));
        // Means are accumulated as offsets from the old centroid, so a
        // cluster of identical points keeps its centroid bit for bit.
        let mut sums = vec![vec![0.0; dim]; size];
        let mut counts = vec![0usize; size];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            for ((s, v), c) in sums[l].iter_mut().zip(p).zip(&cents[l]) {
                *s += v - c;
            }
        }
        for ((c, s), &n) in cents.iter_mut().zip(sums).zip(&counts) {
            if n > 0 {
                for (cv, sv) in c.iter_mut().zip(s) {
                    *cv += sv / n as Scalar;
                }
            }
        }
    }
    history.push(assign(&points, &cents, &mut labels));
    let codebook = Codebook::new(size, patch, channels, cents.concat())?;
    Ok((
        codebook,
        CodebookReport {
            mse_history: history,
            distinct_patches: distinct.len(),
            padded,
        },
    ))
}

/// Maps each patch to its nearest codeword; returns `K = (H/p)·(W/p)` image
/// token ids in row-major patch order.
pub fn encode_image(img: &Image, codebook: &Codebook, vocab: &MixedVocab) -> Result<Vec<TokenId>> {
    if img.channels() != codebook.channels() {
        return Err(Error::shape(format!(
            "image has {} channels, codebook expects {}",
            img.channels(),
            codebook.channels()
        )));
    }
    if codebook.size() != vocab.codebook_size() {
        return Err(Error::shape("codebook size differs from the vocabulary's image range"));
    }
    img.patches(codebook.patch())?
        .iter()
        .map(|p| vocab.image_token(codebook.nearest(p).0))
        .collect()
}

/// Tokens per square image of side `side`.
pub fn tokens_per_image(side: usize, patch: usize) -> usize {
    (side / patch) * (side / patch)
}

/// Pastes codewords back in row-major order into a `side×side` image, with
/// values clamped to `[0, 1]`.
pub fn decode_image(
    tokens: &[TokenId],
    codebook: &Codebook,
    vocab: &MixedVocab,
    side: usize,
) -> Result<Image> {
    let k = tokens_per_image(side, codebook.patch());
    if tokens.len() != k {
        return Err(Error::MalformedBlock {
            offset: 0,
            reason: format!("expected {k} image tokens, got {}", tokens.len()),
        });
    }
    let patches = tokens
        .iter()
        .map(|&t| {
            vocab
                .image_code(t)
                .map(|c| codebook.vector(c).to_vec())
                .ok_or(Error::TokenOutOfRange {
                    id: t,
                    size: vocab.total_size(),
                })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Image::from_patches(&patches, side, side, codebook.channels(), codebook.patch())?.clamp())
}
