//! Grammar-constrained sampling of interleaved image-text sequences.
//!
//! A small state machine tracks whether the decoder is writing text or is
//! inside an image block, and turns that into a mask over the vocabulary.
//! Masked tokens get probability exactly zero, so every emitted sequence
//! matches `BOS (text | BOI image^N EOI)* EOS` and fits the token budget.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::transformer::ModelParams;
use crate::vocab::{append_segments, parse, ByteTokenizer, MultimodalDocument, Segment, TokenClass, VocabLayout};
use crate::vq::{Image, VqModel};
use crate::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Text,
    /// Inside an image block with `count` image tokens emitted so far.
    Image { count: usize },
    Done,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderState {
    mode: Mode,
    tokens: Vec<u32>,
    images: usize,
    max_tokens: usize,
    max_images: usize,
    block_len: usize,
}

impl DecoderState {
    /// A fresh state holding just `BOS`.
    pub fn new(layout: &VocabLayout, max_tokens: usize, max_images: usize) -> Result<Self> {
        if max_tokens < 2 {
            return Err(Error::PromptTooLong { needed: 2, budget: max_tokens });
        }
        Ok(Self {
            mode: Mode::Text,
            tokens: vec![layout.bos()],
            images: 0,
            max_tokens,
            max_images,
            block_len: layout.block_len(),
        })
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn images_emitted(&self) -> usize {
        self.images
    }

    pub fn is_done(&self) -> bool {
        self.mode == Mode::Done
    }

    fn remaining(&self) -> usize {
        self.max_tokens - self.tokens.len()
    }

    /// Appends a token, rejecting anything the mask forbids.
    pub fn push(&mut self, token: u32, layout: &VocabLayout) -> Result<()> {
        let allowed = allowed_mask(self, layout);
        if !allowed.get(token as usize).copied().unwrap_or(false) {
            return Err(Error::Parse { position: self.tokens.len(), reason: "token forbidden in decoder state" });
        }
        self.tokens.push(token);
        self.mode = match (self.mode, layout.classify(token)) {
            (Mode::Text, Some(TokenClass::Boi)) => {
                self.images += 1;
                Mode::Image { count: 0 }
            }
            (Mode::Text, Some(TokenClass::Eos)) => Mode::Done,
            (Mode::Image { count }, Some(TokenClass::Image)) => Mode::Image { count: count + 1 },
            (Mode::Image { .. }, Some(TokenClass::Eoi)) => Mode::Text,
            (mode, _) => mode,
        };
        Ok(())
    }
}

/// Tokens permitted next.
///
/// Text mode allows text ids and EOS, plus BOI while the image budget lasts
/// and a whole block still fits; inside a block only image ids are allowed
/// until N have been emitted, after which only EOI is.
pub fn allowed_mask(state: &DecoderState, layout: &VocabLayout) -> Vec<bool> {
    let mut mask = vec![false; layout.total() as usize];
    match state.mode {
        Mode::Done => {}
        Mode::Text => {
            let remaining = state.remaining();
            if remaining >= 1 {
                mask[layout.eos() as usize] = true;
            }
            if remaining >= 2 {
                mask[..layout.text_vocab() as usize].fill(true);
            }
            if state.images < state.max_images && remaining >= state.block_len + 3 {
                mask[layout.boi() as usize] = true;
            }
        }
        Mode::Image { count } if count < state.block_len => {
            mask[layout.image_start() as usize..layout.bos() as usize].fill(true);
        }
        Mode::Image { .. } => mask[layout.eoi() as usize] = true,
    }
    mask
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SamplerSettings {
    /// 0 means greedy.
    pub temperature: f64,
    /// 0 disables top-k.
    pub top_k: usize,
    /// 1 disables nucleus truncation.
    pub top_p: f64,
}

impl SamplerSettings {
    pub const GREEDY: Self = Self { temperature: 0.0, top_k: 0, top_p: 1.0 };

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidConfig("temperature must be finite and >= 0".into()));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::InvalidConfig("top-p must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingParams {
    pub text: SamplerSettings,
    pub image: SamplerSettings,
    pub seed: u64,
    /// Cap on the whole sequence, prompt included.
    pub max_tokens: usize,
    /// Cap on images generated after the prompt.
    pub max_images: usize,
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self {
            text: SamplerSettings { temperature: 0.9, top_k: 0, top_p: 0.95 },
            image: SamplerSettings { temperature: 1.0, top_k: 0, top_p: 1.0 },
            seed: 0,
            max_tokens: 256,
            max_images: 1,
        }
    }
}

/// Draws one token from `logits` restricted to `mask`.
///
/// Forbidden ids are removed before normalization; temperature, then top-k,
/// then top-p are applied over what remains. Greedy picks ties by lowest id.
pub fn sample_next<T: Real, R: Rng + ?Sized>(
    logits: &[T],
    mask: &[bool],
    settings: &SamplerSettings,
    rng: &mut R,
) -> Result<u32> {
    let mut cand: Vec<(u32, f64)> = mask
        .iter()
        .zip(logits)
        .enumerate()
        .filter(|(_, (&m, _))| m)
        .map(|(i, (_, l))| (i as u32, l.as_f64()))
        .collect();
    if cand.is_empty() {
        return Err(Error::DecodeStuck);
    }
    if settings.temperature == 0.0 || settings.top_k == 1 || cand.len() == 1 {
        let mut best = cand[0];
        for &c in &cand[1..] {
            if c.1 > best.1 {
                best = c;
            }
        }
        return Ok(best.0);
    }
    // descending by logit, ascending id on ties
    cand.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(core::cmp::Ordering::Equal).then(a.0.cmp(&b.0)));
    if settings.top_k > 0 {
        cand.truncate(settings.top_k);
    }
    let max = cand[0].1 / settings.temperature;
    let mut probs: Vec<f64> = cand.iter().map(|c| num_traits::Float::exp(c.1 / settings.temperature - max)).collect();
    let total: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= total;
    }
    if settings.top_p < 1.0 {
        let mut acc = 0.0;
        let mut keep = probs.len();
        for (i, p) in probs.iter().enumerate() {
            acc += p;
            if acc >= settings.top_p {
                keep = i + 1;
                break;
            }
        }
        probs.truncate(keep);
        let total: f64 = probs.iter().sum();
        for p in &mut probs {
            *p /= total;
        }
    }
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return Ok(cand[i].0);
        }
    }
    Ok(cand[probs.len() - 1].0)
}

/// Output of [`generate`].
#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    /// Full sequence, prompt included.
    pub tokens: Vec<u32>,
    /// Tokens belonging to the prompt (BOS and a forced BOI included).
    pub prompt_len: usize,
    /// Parsed sequence with every image decoded to pixels.
    pub document: MultimodalDocument,
    /// Images produced after the prompt, in order.
    pub images: Vec<Image>,
}

/// Continues `prompt` with the language model until EOS or the budget.
///
/// With `force_image` a BOI is appended to the prompt so the model starts an
/// image immediately.
pub fn generate<T: Real>(
    prompt: &MultimodalDocument,
    model: &ModelParams<T>,
    layout: &VocabLayout,
    text: &ByteTokenizer,
    vq: &VqModel<T>,
    params: &SamplingParams,
    force_image: bool,
) -> Result<Generation> {
    model.config().check_layout(layout)?;
    params.text.validate()?;
    params.image.validate()?;
    if vq.config().tokens_per_image() != layout.block_len() || vq.config().codebook_size != layout.image_vocab() as usize
    {
        return Err(Error::InvalidConfig("tokenizer does not match the vocabulary layout".into()));
    }
    if force_image && params.max_images == 0 {
        return Err(Error::InvalidConfig("forced image with an image budget of zero".into()));
    }
    let budget = params.max_tokens.min(model.config().max_seq_len);

    let mut prompt_tokens = vec![layout.bos()];
    append_segments(&mut prompt_tokens, &prompt.segments, layout, text, Some(vq))?;
    let needed = prompt_tokens.len() + if force_image { layout.block_len() + 2 } else { 0 } + 1;
    if needed > budget {
        return Err(Error::PromptTooLong { needed, budget });
    }

    // replay the prompt with an unlimited image budget, then apply the real one
    let mut state = DecoderState::new(layout, budget, usize::MAX)?;
    for &tok in &prompt_tokens[1..] {
        state.push(tok, layout)?;
    }
    let prompt_images = state.images;
    state.max_images = prompt_images.saturating_add(params.max_images);
    if force_image {
        state.push(layout.boi(), layout)?;
    }
    let prompt_len = state.tokens.len();

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    while !state.is_done() {
        let mask = allowed_mask(&state, layout);
        let allowed = mask.iter().filter(|&&m| m).count();
        let token = match allowed {
            0 => return Err(Error::DecodeStuck),
            1 => mask.iter().position(|&m| m).expect("one allowed") as u32,
            _ => {
                let logits = model.forward_last(&state.tokens)?;
                let settings = match state.mode {
                    Mode::Image { .. } => &params.image,
                    _ => &params.text,
                };
                sample_next(&logits, &mask, settings, &mut rng)?
            }
        };
        state.push(token, layout)?;
    }

    let parsed = parse(&state.tokens, layout)?;
    let mut segments = Vec::with_capacity(parsed.segments.len());
    let mut decoded = Vec::new();
    for seg in parsed.segments {
        match seg {
            Segment::Tokens(grid) => {
                let img = vq.decode(&grid)?;
                decoded.push(img.clone());
                segments.push(Segment::Pixels(img));
            }
            other => segments.push(other),
        }
    }
    let images = decoded.split_off(prompt_images.min(decoded.len()));
    Ok(Generation { tokens: state.tokens, prompt_len, document: MultimodalDocument::new(segments), images })
}
