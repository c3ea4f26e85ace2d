//! The fused token space shared by text and image tokens, and conversion of
//! multimodal documents to and from flat token sequences.
//!
//! Layout, bottom to top: text ids `[0, V_text)`, image ids
//! `[V_text, V_text + K)`, then the five sentinels BOS, EOS, BOI, EOI, PAD.
//! A sequence always reads `BOS (text | BOI image^N EOI)* EOS`.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::vq::{Image, TokenGrid};

pub const SENTINEL_COUNT: u32 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TokenClass {
    Text,
    Image,
    Bos,
    Eos,
    Boi,
    Eoi,
    Pad,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VocabLayout {
    text_vocab: u32,
    image_vocab: u32,
    grid_height: u32,
    grid_width: u32,
}

impl VocabLayout {
    /// `grid_height × grid_width` is the fixed image block length N.
    pub fn new(text_vocab: u32, image_vocab: u32, grid_height: u32, grid_width: u32) -> Result<Self> {
        if grid_height == 0 || grid_width == 0 {
            return Err(Error::InvalidConfig("image block must hold at least one token".into()));
        }
        if text_vocab.checked_add(image_vocab).and_then(|v| v.checked_add(SENTINEL_COUNT)).is_none() {
            return Err(Error::InvalidConfig("vocabulary size overflows u32".into()));
        }
        Ok(Self { text_vocab, image_vocab, grid_height, grid_width })
    }

    pub fn text_vocab(&self) -> u32 {
        self.text_vocab
    }

    pub fn image_vocab(&self) -> u32 {
        self.image_vocab
    }

    pub fn grid_height(&self) -> u32 {
        self.grid_height
    }

    pub fn grid_width(&self) -> u32 {
        self.grid_width
    }

    /// Tokens per image block (N).
    pub fn block_len(&self) -> usize {
        (self.grid_height * self.grid_width) as usize
    }

    pub fn total(&self) -> u32 {
        self.text_vocab + self.image_vocab + SENTINEL_COUNT
    }

    pub fn image_start(&self) -> u32 {
        self.text_vocab
    }

    pub fn bos(&self) -> u32 {
        self.text_vocab + self.image_vocab
    }

    pub fn eos(&self) -> u32 {
        self.bos() + 1
    }

    pub fn boi(&self) -> u32 {
        self.bos() + 2
    }

    pub fn eoi(&self) -> u32 {
        self.bos() + 3
    }

    pub fn pad(&self) -> u32 {
        self.bos() + 4
    }

    pub fn classify(&self, id: u32) -> Option<TokenClass> {
        let b = self.bos();
        Some(match id {
            _ if id < self.text_vocab => TokenClass::Text,
            _ if id < b => TokenClass::Image,
            _ if id == b => TokenClass::Bos,
            _ if id == b + 1 => TokenClass::Eos,
            _ if id == b + 2 => TokenClass::Boi,
            _ if id == b + 3 => TokenClass::Eoi,
            _ if id == b + 4 => TokenClass::Pad,
            _ => return None,
        })
    }

    pub fn is_image(&self, id: u32) -> bool {
        id >= self.text_vocab && id < self.bos()
    }

    pub fn to_global(&self, local: u32) -> Result<u32> {
        if local >= self.image_vocab {
            return Err(Error::TokenRange { id: local, limit: self.image_vocab });
        }
        Ok(self.text_vocab + local)
    }

    pub fn to_local(&self, global: u32) -> Result<u32> {
        if !self.is_image(global) {
            return Err(Error::TokenRange { id: global, limit: self.bos() });
        }
        Ok(global - self.text_vocab)
    }
}

/// Byte-level text tokenizer: token id = byte value, restricted to `[0, vocab)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ByteTokenizer {
    vocab: u32,
}

impl Default for ByteTokenizer {
    fn default() -> Self {
        Self { vocab: 256 }
    }
}

impl ByteTokenizer {
    pub fn new(vocab: u32) -> Result<Self> {
        if vocab == 0 || vocab > 256 {
            return Err(Error::InvalidConfig("byte vocabulary must be in 1..=256".into()));
        }
        Ok(Self { vocab })
    }

    pub fn vocab(&self) -> u32 {
        self.vocab
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        text.bytes()
            .enumerate()
            .map(|(offset, byte)| {
                if (byte as u32) < self.vocab {
                    Ok(byte as u32)
                } else {
                    Err(Error::Tokenization { byte, offset })
                }
            })
            .collect()
    }

    /// Invalid UTF-8 (possible in sampled text) is replaced, never rejected.
    pub fn decode(&self, ids: &[u32]) -> String {
        let bytes: Vec<u8> = ids.iter().map(|&id| id.min(255) as u8).collect();
        String::from_utf8_lossy(&bytes).into_owned()
    }
}

/// Anything that turns pixels into a grid of local image token ids.
pub trait ImageTokenizer {
    fn tokenize(&self, image: &Image) -> Result<TokenGrid>;
}

impl<T: crate::Real> ImageTokenizer for crate::vq::VqModel<T> {
    fn tokenize(&self, image: &Image) -> Result<TokenGrid> {
        crate::vq::VqModel::tokenize(self, image)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Segment {
    Text(String),
    /// An image already tokenized into local ids.
    Tokens(TokenGrid),
    /// An image in pixel space; needs an [`ImageTokenizer`] to compose.
    Pixels(Image),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MultimodalDocument {
    pub segments: Vec<Segment>,
}

impl MultimodalDocument {
    pub fn new(segments: Vec<Segment>) -> Self {
        Self { segments }
    }

    pub fn text(s: impl Into<String>) -> Self {
        Self { segments: alloc::vec![Segment::Text(s.into())] }
    }

    pub fn image_count(&self) -> usize {
        self.segments.iter().filter(|s| !matches!(s, Segment::Text(_))).count()
    }

    /// The form `parse` produces: adjacent text merged, empty text dropped.
    pub fn normalized(&self) -> Self {
        let mut out: Vec<Segment> = Vec::new();
        for seg in &self.segments {
            match (seg, out.last_mut()) {
                (Segment::Text(s), _) if s.is_empty() => {}
                (Segment::Text(s), Some(Segment::Text(prev))) => prev.push_str(s),
                _ => out.push(seg.clone()),
            }
        }
        Self { segments: out }
    }
}

/// Flattens a document into `BOS · segments · EOS`, each image as
/// `BOI · N global image ids · EOI`.
pub fn compose(
    doc: &MultimodalDocument,
    layout: &VocabLayout,
    text: &ByteTokenizer,
    images: Option<&dyn ImageTokenizer>,
) -> Result<Vec<u32>> {
    let mut seq = alloc::vec![layout.bos()];
    append_segments(&mut seq, &doc.segments, layout, text, images)?;
    seq.push(layout.eos());
    Ok(seq)
}

/// Appends segment tokens without the surrounding BOS/EOS.
pub fn append_segments(
    seq: &mut Vec<u32>,
    segments: &[Segment],
    layout: &VocabLayout,
    text: &ByteTokenizer,
    images: Option<&dyn ImageTokenizer>,
) -> Result<()> {
    if text.vocab() > layout.text_vocab() {
        return Err(Error::InvalidConfig("text tokenizer is larger than the layout's text range".into()));
    }
    for seg in segments {
        match seg {
            Segment::Text(s) => seq.extend(text.encode(s)?),
            Segment::Tokens(grid) => push_image(seq, grid, layout)?,
            Segment::Pixels(img) => {
                let tok = images.ok_or(Error::MissingImageTokenizer)?;
                push_image(seq, &tok.tokenize(img)?, layout)?;
            }
        }
    }
    Ok(())
}

fn push_image(seq: &mut Vec<u32>, grid: &TokenGrid, layout: &VocabLayout) -> Result<()> {
    if grid.height != layout.grid_height() as usize || grid.width != layout.grid_width() as usize {
        return Err(crate::error::shape_err(
            alloc::format!("{}x{} token grid", layout.grid_height(), layout.grid_width()),
            alloc::format!("{}x{} token grid", grid.height, grid.width),
        ));
    }
    seq.push(layout.boi());
    for &id in &grid.ids {
        seq.push(layout.to_global(id)?);
    }
    seq.push(layout.eoi());
    Ok(())
}

/// Inverse of [`compose`]. Image blocks come back as [`Segment::Tokens`].
pub fn parse(seq: &[u32], layout: &VocabLayout) -> Result<MultimodalDocument> {
    let text = ByteTokenizer::new(layout.text_vocab().clamp(1, 256)).expect("clamped");
    let err = |position: usize, reason: &'static str| Error::Parse { position, reason };
    let class_at = |i: usize| layout.classify(seq[i]).ok_or(err(i, "token id outside the vocabulary"));

    if seq.is_empty() {
        return Err(err(0, "empty sequence"));
    }
    if class_at(0)? != TokenClass::Bos {
        return Err(err(0, "sequence must start with BOS"));
    }
    let n = layout.block_len();
    let mut segments = Vec::new();
    let mut pending_text: Vec<u32> = Vec::new();
    let mut i = 1;
    loop {
        if i >= seq.len() {
            return Err(err(i, "missing EOS"));
        }
        match class_at(i)? {
            TokenClass::Text => {
                pending_text.push(seq[i]);
                i += 1;
            }
            TokenClass::Boi => {
                if !pending_text.is_empty() {
                    segments.push(Segment::Text(text.decode(&pending_text)));
                    pending_text.clear();
                }
                let mut ids = Vec::with_capacity(n);
                for k in 0..n {
                    let p = i + 1 + k;
                    if p >= seq.len() {
                        return Err(err(p, "image block truncated"));
                    }
                    if class_at(p)? != TokenClass::Image {
                        return Err(err(p, "image block shorter than the fixed block length"));
                    }
                    ids.push(seq[p] - layout.image_start());
                }
                let close = i + 1 + n;
                if close >= seq.len() {
                    return Err(err(close, "image block truncated"));
                }
                match class_at(close)? {
                    TokenClass::Eoi => {}
                    TokenClass::Image => return Err(err(close, "image block longer than the fixed block length")),
                    _ => return Err(err(close, "image block not closed by EOI")),
                }
                let grid = TokenGrid::new(layout.grid_height() as usize, layout.grid_width() as usize, ids)?;
                segments.push(Segment::Tokens(grid));
                i = close + 1;
            }
            TokenClass::Eos => {
                if !pending_text.is_empty() {
                    segments.push(Segment::Text(text.decode(&pending_text)));
                }
                if i + 1 != seq.len() {
                    return Err(err(i + 1, "tokens after EOS"));
                }
                return Ok(MultimodalDocument { segments });
            }
            TokenClass::Image => return Err(err(i, "image token outside image block")),
            TokenClass::Eoi => return Err(err(i, "EOI without matching BOI")),
            TokenClass::Bos => return Err(err(i, "BOS after start of sequence")),
            TokenClass::Pad => return Err(err(i, "PAD inside sequence")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn layout() -> VocabLayout {
        VocabLayout::new(256, 64, 8, 8).unwrap()
    }

    #[test]
    fn ids_are_partitioned() {
        let l = layout();
        assert_eq!(l.total(), 325);
        let mut counts = [0usize; 7];
        for id in 0..l.total() {
            let c = l.classify(id).unwrap();
            counts[c as usize] += 1;
        }
        assert_eq!(counts, [256, 64, 1, 1, 1, 1, 1]);
        assert_eq!(l.classify(l.total()), None);
    }

    #[test]
    fn global_local_conversion() {
        let l = VocabLayout::new(1000, 64, 8, 8).unwrap();
        assert_eq!(l.to_global(0).unwrap(), 1000);
        assert_eq!(l.to_global(5).unwrap(), 1005);
        assert!(l.to_global(64).is_err());
        assert_eq!(l.to_local(1005).unwrap(), 5);
        assert!(l.to_local(999).is_err());
        assert!(l.to_local(l.boi()).is_err());
        for i in 0..64 {
            assert_eq!(l.to_local(l.to_global(i).unwrap()).unwrap(), i);
        }
    }

    #[test]
    fn compose_examples() {
        let l = layout();
        let t = ByteTokenizer::default();
        let empty = compose(&MultimodalDocument::default(), &l, &t, None).unwrap();
        assert_eq!(empty, vec![l.bos(), l.eos()]);
        let ab = compose(&MultimodalDocument::text("ab"), &l, &t, None).unwrap();
        assert_eq!(ab, vec![l.bos(), b'a' as u32, b'b' as u32, l.eos()]);

        let grid = TokenGrid::new(8, 8, (0..64).collect()).unwrap();
        let doc = MultimodalDocument::new(vec![Segment::Text("abc".into()), Segment::Tokens(grid)]);
        let seq = compose(&doc, &l, &t, None).unwrap();
        assert_eq!(seq.len(), 2 + 3 + 66);
        assert_eq!(seq[4], l.boi());
        assert!(seq[5..69].iter().all(|&id| l.is_image(id)));
        assert_eq!(seq[69], l.eoi());
    }

    #[test]
    fn compose_errors() {
        let l = layout();
        let ascii = ByteTokenizer::new(128).unwrap();
        let doc = MultimodalDocument::text("caf\u{e9}");
        assert_eq!(compose(&doc, &l, &ascii, None), Err(Error::Tokenization { byte: 0xc3, offset: 3 }));
        let pixels = MultimodalDocument::new(vec![Segment::Pixels(Image::filled(32, 32, 0.0))]);
        assert_eq!(compose(&pixels, &l, &ascii, None), Err(Error::MissingImageTokenizer));
        let wrong = MultimodalDocument::new(vec![Segment::Tokens(TokenGrid::new(4, 4, vec![0; 16]).unwrap())]);
        assert!(matches!(compose(&wrong, &l, &ascii, None), Err(Error::Shape { .. })));
    }

    #[test]
    fn parse_examples() {
        let l = layout();
        assert_eq!(parse(&[l.bos(), l.eos()], &l).unwrap(), MultimodalDocument::default());
        assert_eq!(
            parse(&[l.bos(), l.image_start(), l.eos()], &l),
            Err(Error::Parse { position: 1, reason: "image token outside image block" })
        );
        let mut short = vec![l.bos(), l.boi()];
        short.extend((0..63).map(|i| l.image_start() + i));
        short.extend([l.eoi(), l.eos()]);
        assert!(matches!(parse(&short, &l), Err(Error::Parse { position: 65, .. })));
        assert!(matches!(parse(&[l.bos(), l.eoi(), l.eos()], &l), Err(Error::Parse { position: 1, .. })));
        assert!(matches!(parse(&[l.bos(), 65], &l), Err(Error::Parse { position: 2, .. })));
        assert!(matches!(parse(&[l.bos(), l.eos(), 65], &l), Err(Error::Parse { position: 2, .. })));
    }
}
