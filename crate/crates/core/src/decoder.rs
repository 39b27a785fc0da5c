//! Mixed-modal generation: a two-mode state machine (text, or inside an
//! image block of fixed length `k`) that masks logits to the legal token set
//! at every step, with a streaming driver and a fused driver that produces
//! whole image blocks in an inner loop.
//!
//! EOI is never sampled: once the last image token of a block is drawn the
//! engine emits EOI itself. `max_tokens` never cuts a block short.

use std::collections::VecDeque;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{parse_value, KeyValues, Settings};
use crate::error::{Error, Result};
use crate::model::InferenceSession;
use crate::numerics::Scalar;
use crate::tokenizer::{decode_image, encode_image, BpeModel, Codebook, Image, MixedVocab, Special, TokenClass};
use crate::TokenId;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Text,
    /// Inside an image block with `remaining ∈ [1, k]` tokens still to draw.
    Image { remaining: usize },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecodeState {
    pub mode: Mode,
    /// Tokens produced so far, forced ones included; the prompt is not part
    /// of it.
    pub emitted: Vec<TokenId>,
    /// Sampling calls made.
    pub steps: u64,
    /// Image tokens per block.
    pub k: usize,
    /// Image blocks closed by the engine.
    pub blocks_closed: usize,
    /// The prompt ended on a full but unclosed block; EOI comes first.
    pub pending_eoi: bool,
}

impl fmt::Display for DecodeState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.mode {
            Mode::Text => write!(f, "text mode after {} tokens", self.emitted.len()),
            Mode::Image { remaining } => write!(f, "image block with {remaining} of {} tokens left", self.k),
        }
    }
}

impl DecodeState {
    pub fn new(k: usize) -> Self {
        DecodeState {
            mode: Mode::Text,
            emitted: Vec::new(),
            steps: 0,
            k,
            blocks_closed: 0,
            pending_eoi: false,
        }
    }

    /// The state right after `prompt`, which may end inside an image block.
    pub fn from_prompt(prompt: &[TokenId], vocab: &MixedVocab, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::config("image blocks need at least one token"));
        }
        vocab.check_blocks(prompt, k, true)?;
        let mut s = DecodeState::new(k);
        if let Some(boi) = prompt.iter().rposition(|&t| t == vocab.boi()) {
            if !prompt[boi..].contains(&vocab.eoi()) {
                let drawn = prompt.len() - boi - 1;
                if drawn == k {
                    s.pending_eoi = true;
                } else {
                    s.mode = Mode::Image { remaining: k - drawn };
                }
            }
        }
        Ok(s)
    }
}

/// Which modalities may be generated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Modality {
    #[default]
    Any,
    TextOnly,
    /// Exactly one image block, then stop.
    ImageOnly,
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Any => "any",
            Modality::TextOnly => "text",
            Modality::ImageOnly => "image",
        })
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "any" => Ok(Modality::Any),
            "text" => Ok(Modality::TextOnly),
            "image" => Ok(Modality::ImageOnly),
            other => Err(Error::config(format!("unknown modality `{other}` (any|text|image)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Sampling {
    Greedy,
    Temperature(Scalar),
    /// Nucleus sampling at temperature `temperature`.
    TopP { p: Scalar, temperature: Scalar },
}

impl Sampling {
    pub fn validate(&self) -> Result<()> {
        let t_ok = |t: Scalar| t > 0.0 && t.is_finite();
        match *self {
            Sampling::Greedy => Ok(()),
            Sampling::Temperature(t) if t_ok(t) => Ok(()),
            Sampling::TopP { p, temperature } if p > 0.0 && p <= 1.0 && t_ok(temperature) => Ok(()),
            other => Err(Error::config(format!(
                "invalid sampling {other:?}: temperature must be positive and p in (0, 1]"
            ))),
        }
    }
}

/// Written `greedy`, `temperature:T` or `top-p:P:T`.
impl fmt::Display for Sampling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Sampling::Greedy => f.write_str("greedy"),
            Sampling::Temperature(t) => write!(f, "temperature:{t}"),
            Sampling::TopP { p, temperature } => write!(f, "top-p:{p}:{temperature}"),
        }
    }
}

impl FromStr for Sampling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let num = |x: &str| parse_value::<Scalar>("sampling", x);
        let out = match parts.as_slice() {
            ["greedy"] => Sampling::Greedy,
            ["temperature", t] => Sampling::Temperature(num(t)?),
            ["top-p", p] => Sampling::TopP { p: num(p)?, temperature: 1.0 },
            ["top-p", p, t] => Sampling::TopP { p: num(p)?, temperature: num(t)? },
            _ => {
                return Err(Error::config(format!(
                    "bad sampling `{s}` (greedy | temperature:T | top-p:P[:T])"
                )))
            }
        };
        out.validate()?;
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodePolicy {
    pub constraint: Modality,
    pub sampling: Sampling,
    pub max_tokens: usize,
    pub seed: u64,
    /// Sampling used inside image blocks; `None` keeps `sampling`.
    pub image_sampling: Option<Sampling>,
}

impl Default for DecodePolicy {
    fn default() -> Self {
        DecodePolicy {
            constraint: Modality::Any,
            sampling: Sampling::Temperature(1.0),
            max_tokens: 64,
            seed: 0,
            image_sampling: None,
        }
    }
}

impl DecodePolicy {
    pub fn validate(&self) -> Result<()> {
        self.sampling.validate()?;
        if let Some(s) = &self.image_sampling {
            s.validate()?;
        }
        Ok(())
    }

    fn sampling_for(&self, mode: Mode) -> Sampling {
        match mode {
            Mode::Image { .. } => self.image_sampling.unwrap_or(self.sampling),
            Mode::Text => self.sampling,
        }
    }
}

impl Settings for DecodePolicy {
    fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("constraint", self.constraint);
        kv.set("sampling", self.sampling);
        kv.set("max_tokens", self.max_tokens);
        kv.set("seed", self.seed);
        match &self.image_sampling {
            Some(s) => kv.set("image_sampling", s),
            None => kv.set("image_sampling", "none"),
        }
        kv
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "constraint" => self.constraint = v.parse()?,
            "sampling" => self.sampling = v.parse()?,
            "max_tokens" => self.max_tokens = parse_value(key, v)?,
            "seed" => self.seed = parse_value(key, v)?,
            "image_sampling" if v == "none" => self.image_sampling = None,
            "image_sampling" => self.image_sampling = Some(v.parse()?),
            other => return Err(Error::config(format!("unknown decode key `{other}`"))),
        }
        Ok(())
    }
}

/// Legal next tokens in `state` under `policy`, indexed by token id.
pub fn legal_mask(state: &DecodeState, policy: &DecodePolicy, vocab: &MixedVocab) -> Vec<bool> {
    let mut m = vec![false; vocab.total_size()];
    if state.pending_eoi {
        return m;
    }
    match (state.mode, policy.constraint) {
        (Mode::Image { .. }, _) => vocab.image_range().for_each(|i| m[i as usize] = true),
        (Mode::Text, Modality::ImageOnly) if state.blocks_closed == 0 => m[vocab.boi() as usize] = true,
        (Mode::Text, Modality::ImageOnly) => m[vocab.eos() as usize] = true,
        (Mode::Text, c) => {
            vocab.text_range().for_each(|i| m[i as usize] = true);
            m[vocab.eos() as usize] = true;
            if c == Modality::Any {
                m[vocab.boi() as usize] = true;
            }
        }
    }
    m
}

/// Draws one token from `logits` restricted to `mask`. Consumes exactly
/// one uniform from `rng` unless sampling is greedy.
pub fn sample_masked<R: Rng + ?Sized>(
    logits: &[Scalar],
    mask: &[bool],
    sampling: Sampling,
    rng: &mut R,
) -> Result<TokenId> {
    if logits.len() != mask.len() {
        return Err(Error::shape(format!(
            "{} logits for a vocabulary of {}",
            logits.len(),
            mask.len()
        )));
    }
    let legal: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    if legal.is_empty() {
        return Err(Error::NoLegalToken("empty legal set".into()));
    }
    let best = legal
        .iter()
        .copied()
        .filter(|&i| !logits[i].is_nan())
        .fold(None, |acc: Option<usize>, i| match acc {
            Some(j) if logits[j] >= logits[i] => Some(j),
            _ => Some(i),
        })
        .ok_or_else(|| Error::NoLegalToken("every legal logit is NaN".into()))?;
    let (p_keep, temperature) = match sampling {
        Sampling::Greedy => return Ok(best as TokenId),
        Sampling::Temperature(t) => (1.0, t),
        Sampling::TopP { p, temperature } => (p, temperature),
    };
    let u: Scalar = rng.random();
    let top = logits[best];
    if top == Scalar::INFINITY || top == Scalar::NEG_INFINITY {
        return Ok(best as TokenId);
    }
    let mut w: Vec<(usize, Scalar)> = legal
        .iter()
        .map(|&i| {
            let z = logits[i];
            (i, if z.is_nan() { 0.0 } else { ((z - top) / temperature).exp() })
        })
        .collect();
    if p_keep < 1.0 {
        let total: Scalar = w.iter().map(|x| x.1).sum();
        w.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let mut acc = 0.0;
        let mut keep = 0;
        for (_, x) in &w {
            acc += x / total;
            keep += 1;
            if acc >= p_keep {
                break;
            }
        }
        w.truncate(keep);
    }
    let total: Scalar = w.iter().map(|x| x.1).sum();
    let target = u * total;
    let mut acc = 0.0;
    for &(i, x) in &w {
        acc += x;
        if target < acc {
            return Ok(i as TokenId);
        }
    }
    Ok(w.iter().rev().find(|x| x.1 > 0.0).map_or(best, |x| x.0) as TokenId)
}

/// What one [`step`] appended.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Emission {
    pub token: TokenId,
    /// The block closed and EOI was appended after `token`.
    pub forced_eoi: bool,
}

/// Samples one token under the legal mask and advances the state machine.
pub fn step<R: Rng + ?Sized>(
    state: &mut DecodeState,
    logits: &[Scalar],
    policy: &DecodePolicy,
    vocab: &MixedVocab,
    rng: &mut R,
) -> Result<Emission> {
    if logits.len() != vocab.total_size() {
        return Err(Error::shape(format!(
            "{} logits for a vocabulary of {}",
            logits.len(),
            vocab.total_size()
        )));
    }
    if state.pending_eoi {
        state.pending_eoi = false;
        state.emitted.push(vocab.eoi());
        state.blocks_closed += 1;
        return Ok(Emission {
            token: vocab.eoi(),
            forced_eoi: false,
        });
    }
    let mask = legal_mask(state, policy, vocab);
    let token = sample_masked(logits, &mask, policy.sampling_for(state.mode), rng)
        .map_err(|e| match e {
            Error::NoLegalToken(_) => Error::NoLegalToken(state.to_string()),
            other => other,
        })?;
    state.steps += 1;
    state.emitted.push(token);
    let mut forced_eoi = false;
    state.mode = match state.mode {
        Mode::Text if token == vocab.boi() => Mode::Image { remaining: state.k },
        Mode::Text => Mode::Text,
        Mode::Image { remaining: 1 } => {
            state.emitted.push(vocab.eoi());
            state.blocks_closed += 1;
            forced_eoi = true;
            Mode::Text
        }
        Mode::Image { remaining } => Mode::Image { remaining: remaining - 1 },
    };
    Ok(Emission { token, forced_eoi })
}

/// A model that returns next-token logits one token at a time.
pub trait StepModel {
    fn vocab_size(&self) -> usize;
    fn context_length(&self) -> usize;
    fn position(&self) -> usize;
    fn feed(&mut self, token: TokenId) -> Result<Vec<Scalar>>;
}

impl StepModel for InferenceSession<'_> {
    fn vocab_size(&self) -> usize {
        self.model().config.vocab_size()
    }

    fn context_length(&self) -> usize {
        self.model().config.context_length
    }

    fn position(&self) -> usize {
        InferenceSession::position(self)
    }

    fn feed(&mut self, token: TokenId) -> Result<Vec<Scalar>> {
        InferenceSession::feed(self, token)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    Eos,
    MaxTokens,
    /// An image-only request finished its block.
    ImageDone,
    ContextFull,
}

#[derive(Clone, Debug, PartialEq)]
pub enum StreamEvent {
    Token(TokenId),
    ImageBlockStart,
    /// The bare image tokens of the finished block, and the decoded image
    /// when a codebook is attached.
    ImageBlockEnd { codes: Vec<TokenId>, image: Option<Image> },
}

/// Shared setup of both drivers: validates, runs the model over `prompt`
/// (preceded by BOS unless it already starts with it) and seeds the rng.
struct Start {
    state: DecodeState,
    logits: Vec<Scalar>,
    rng: ChaCha8Rng,
}

fn start<M: StepModel>(
    model: &mut M,
    prompt: &[TokenId],
    policy: &DecodePolicy,
    vocab: &MixedVocab,
    k: usize,
) -> Result<Start> {
    policy.validate()?;
    if model.vocab_size() != vocab.total_size() {
        return Err(Error::config(format!(
            "model vocabulary {} differs from the tokenizer's {}",
            model.vocab_size(),
            vocab.total_size()
        )));
    }
    let state = DecodeState::from_prompt(prompt, vocab, k)?;
    let mut logits = Vec::new();
    if prompt.first() != Some(&vocab.bos()) {
        logits = model.feed(vocab.bos())?;
    }
    for &t in prompt {
        logits = model.feed(t)?;
    }
    Ok(Start {
        state,
        logits,
        rng: ChaCha8Rng::seed_from_u64(policy.seed),
    })
}

/// Checked only between blocks.
fn stop_reason<M: StepModel>(
    state: &DecodeState,
    policy: &DecodePolicy,
    vocab: &MixedVocab,
    model: &M,
) -> Option<StopReason> {
    if state.mode != Mode::Text || state.pending_eoi {
        return None;
    }
    match state.emitted.last() {
        Some(&t) if t == vocab.eos() => return Some(StopReason::Eos),
        Some(&t) if t == vocab.eoi() && policy.constraint == Modality::ImageOnly && state.blocks_closed > 0 => {
            return Some(StopReason::ImageDone)
        }
        _ => {}
    }
    if state.emitted.len() >= policy.max_tokens {
        return Some(StopReason::MaxTokens);
    }
    if model.position() >= model.context_length() {
        return Some(StopReason::ContextFull);
    }
    None
}

/// Streaming generation: an iterator over tokens and block events in
/// emission order. Every token is inspected as it is produced.
pub struct GenerationStream<'c, M: StepModel> {
    model: M,
    vocab: MixedVocab,
    policy: DecodePolicy,
    state: DecodeState,
    logits: Vec<Scalar>,
    rng: ChaCha8Rng,
    queue: VecDeque<StreamEvent>,
    stopped: Option<StopReason>,
    failed: bool,
    codebook: Option<(&'c Codebook, usize)>,
    codes: Vec<TokenId>,
}

pub fn generate_stream<'c, M: StepModel>(
    mut model: M,
    prompt: &[TokenId],
    policy: &DecodePolicy,
    vocab: &MixedVocab,
    k: usize,
) -> Result<GenerationStream<'c, M>> {
    let s = start(&mut model, prompt, policy, vocab, k)?;
    let codes = match prompt.iter().rposition(|&t| t == vocab.boi()) {
        Some(b) if s.state.mode != Mode::Text || s.state.pending_eoi => prompt[b + 1..].to_vec(),
        _ => Vec::new(),
    };
    Ok(GenerationStream {
        model,
        vocab: *vocab,
        policy: policy.clone(),
        state: s.state,
        logits: s.logits,
        rng: s.rng,
        queue: VecDeque::new(),
        stopped: None,
        failed: false,
        codebook: None,
        codes,
    })
}

impl<'c, M: StepModel> GenerationStream<'c, M> {
    /// Decode each finished block to an image of side `side`.
    pub fn with_codebook(mut self, codebook: &'c Codebook, side: usize) -> Self {
        self.codebook = Some((codebook, side));
        self
    }

    pub fn state(&self) -> &DecodeState {
        &self.state
    }

    /// Set once the stream is exhausted without error.
    pub fn stop_reason(&self) -> Option<StopReason> {
        self.stopped
    }

    fn block_end(&mut self) -> Result<StreamEvent> {
        let codes = std::mem::take(&mut self.codes);
        let image = match self.codebook {
            Some((cb, side)) => Some(decode_image(&codes, cb, &self.vocab, side)?),
            None => None,
        };
        Ok(StreamEvent::ImageBlockEnd { codes, image })
    }

    fn advance(&mut self) -> Result<()> {
        if let Some(r) = stop_reason(&self.state, &self.policy, &self.vocab, &self.model) {
            self.stopped = Some(r);
            return Ok(());
        }
        let was_text = self.state.mode == Mode::Text;
        let e = step(&mut self.state, &self.logits, &self.policy, &self.vocab, &mut self.rng)?;
        self.queue.push_back(StreamEvent::Token(e.token));
        if e.token == self.vocab.eoi() {
            let end = self.block_end()?;
            self.queue.push_back(end);
        } else if was_text && e.token == self.vocab.boi() {
            self.codes.clear();
            self.queue.push_back(StreamEvent::ImageBlockStart);
        } else if self.vocab.is_image(e.token) {
            self.codes.push(e.token);
        }
        if e.forced_eoi {
            self.queue.push_back(StreamEvent::Token(self.vocab.eoi()));
            let end = self.block_end()?;
            self.queue.push_back(end);
        }
        if stop_reason(&self.state, &self.policy, &self.vocab, &self.model).is_none() {
            self.logits = self.model.feed(e.token)?;
            if e.forced_eoi {
                self.logits = self.model.feed(self.vocab.eoi())?;
            }
        }
        Ok(())
    }

    /// Drains the stream and returns the emitted tokens.
    pub fn collect_tokens(mut self) -> Result<(Vec<TokenId>, StopReason)> {
        for ev in self.by_ref() {
            ev?;
        }
        let reason = self.stopped.expect("exhausted stream has a stop reason");
        Ok((self.state.emitted, reason))
    }
}

impl<M: StepModel> Iterator for GenerationStream<'_, M> {
    type Item = Result<StreamEvent>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            if let Some(ev) = self.queue.pop_front() {
                return Some(Ok(ev));
            }
            if self.stopped.is_some() || self.failed {
                return None;
            }
            if let Err(e) = self.advance() {
                self.failed = true;
                return Some(Err(e));
            }
        }
    }
}

/// Generation with image blocks drawn by an inner loop under a precomputed
/// image-only mask. Token-identical to [`generate_stream`] for the same
/// seed and policy.
pub fn generate_fused<M: StepModel>(
    mut model: M,
    prompt: &[TokenId],
    policy: &DecodePolicy,
    vocab: &MixedVocab,
    k: usize,
) -> Result<(Vec<TokenId>, StopReason)> {
    let Start {
        mut state,
        mut logits,
        mut rng,
    } = start(&mut model, prompt, policy, vocab, k)?;
    let mut image_mask = vec![false; vocab.total_size()];
    vocab.image_range().for_each(|i| image_mask[i as usize] = true);
    let image_sampling = policy.sampling_for(Mode::Image { remaining: 1 });
    loop {
        if let Some(r) = stop_reason(&state, policy, vocab, &model) {
            return Ok((state.emitted, r));
        }
        match state.mode {
            Mode::Text => {
                let e = step(&mut state, &logits, policy, vocab, &mut rng)?;
                if stop_reason(&state, policy, vocab, &model).is_none() {
                    logits = model.feed(e.token)?;
                }
            }
            Mode::Image { remaining } => {
                let mut last = vocab.eoi();
                for i in 0..remaining {
                    let t = sample_masked(&logits, &image_mask, image_sampling, &mut rng)?;
                    state.emitted.push(t);
                    state.steps += 1;
                    if i + 1 < remaining {
                        logits = model.feed(t)?;
                    }
                    last = t;
                }
                state.emitted.push(vocab.eoi());
                state.blocks_closed += 1;
                state.mode = Mode::Text;
                if stop_reason(&state, policy, vocab, &model).is_none() {
                    model.feed(last)?;
                    logits = model.feed(vocab.eoi())?;
                }
            }
        }
    }
}

/// One piece of a generated document.
#[derive(Clone, Debug, PartialEq)]
pub enum DocSegment {
    Text(String),
    Image(Image),
}

/// Splits `tokens` into text spans and decoded images, in order. Special
/// tokens other than BOI/EOI are dropped.
pub fn detokenize_mixed(
    tokens: &[TokenId],
    vocab: &MixedVocab,
    codebook: &Codebook,
    bpe: &BpeModel,
    side: usize,
) -> Result<Vec<DocSegment>> {
    let k = crate::tokenizer::tokens_per_image(side, codebook.patch());
    vocab.check_blocks(tokens, k, false)?;
    let mut out = Vec::new();
    let mut text: Vec<TokenId> = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        let t = tokens[i];
        match vocab.classify(t)? {
            TokenClass::Text => text.push(t),
            TokenClass::Special(Special::Boi) => {
                if !text.is_empty() {
                    out.push(DocSegment::Text(bpe.decode_lossy(&std::mem::take(&mut text))?));
                }
                let codes = &tokens[i + 1..i + 1 + k];
                out.push(DocSegment::Image(decode_image(codes, codebook, vocab, side)?));
                i += k + 1;
            }
            _ => {}
        }
        i += 1;
    }
    if !text.is_empty() {
        out.push(DocSegment::Text(bpe.decode_lossy(&text)?));
    }
    Ok(out)
}

/// Inverse of [`detokenize_mixed`] for documents whose images match the
/// tokenizer's size.
pub fn retokenize(doc: &[DocSegment], vocab: &MixedVocab, codebook: &Codebook, bpe: &BpeModel) -> Result<Vec<TokenId>> {
    let mut out = Vec::new();
    for seg in doc {
        match seg {
            DocSegment::Text(s) => out.extend(bpe.encode_str(s)),
            DocSegment::Image(img) => {
                out.push(vocab.boi());
                out.extend(encode_image(img, codebook, vocab)?);
                out.push(vocab.eoi());
            }
        }
    }
    Ok(out)
}

/// Writes `segment_NNN.txt` / `segment_NNN.ppm` files and a `manifest`
/// listing `kind file` in document order.
pub fn write_document(dir: &Path, doc: &[DocSegment]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let mut manifest = String::new();
    for (i, seg) in doc.iter().enumerate() {
        let name = match seg {
            DocSegment::Text(s) => {
                let name = format!("segment_{i:03}.txt");
                let p = dir.join(&name);
                fs::write(&p, s).map_err(|e| Error::io(format!("writing {}", p.display()), e))?;
                manifest.push_str("text ");
                name
            }
            DocSegment::Image(img) => {
                let name = format!("segment_{i:03}.ppm");
                img.save(&dir.join(&name))?;
                manifest.push_str("image ");
                name
            }
        };
        manifest.push_str(&name);
        manifest.push('\n');
    }
    let p = dir.join("manifest");
    fs::write(&p, manifest).map_err(|e| Error::io(format!("writing {}", p.display()), e))
}
