//! Documents to token sequences to padded, weighted batches.

use anole_core::transformer::Batch;
use anole_core::vocab::{compose, ByteTokenizer, ImageTokenizer, MultimodalDocument, TokenClass, VocabLayout};
use anole_core::finetune::finetune_weight;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

/// Per-target loss weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Weighting {
    Uniform,
    /// Image-id targets scaled by `image`; everything else weighs 1.
    Pretrain { image: f32 },
    /// Image ids, BOI and EOI only.
    Finetune,
}

impl Weighting {
    pub fn weight(self, layout: &VocabLayout, target: u32) -> f32 {
        match self {
            Weighting::Uniform => 1.0,
            Weighting::Pretrain { image } => match layout.classify(target) {
                Some(TokenClass::Image) => image,
                _ => 1.0,
            },
            Weighting::Finetune => finetune_weight(layout, target),
        }
    }
}

pub fn tokenize(
    docs: &[MultimodalDocument],
    layout: &VocabLayout,
    images: Option<&dyn ImageTokenizer>,
) -> Result<Vec<Vec<u32>>> {
    let text = ByteTokenizer::default();
    Ok(docs.iter().map(|d| compose(d, layout, &text, images)).collect::<Result<_, _>>()?)
}

/// Endless seeded index order over `0..n`, reshuffled at every epoch.
pub struct IndexStream {
    n: usize,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl IndexStream {
    pub fn new(n: usize, seed: u64) -> Self {
        Self { n, rng: ChaCha8Rng::seed_from_u64(seed), order: Vec::new(), cursor: 0 }
    }

    /// The next `count` indices; empty when `n == 0`.
    pub fn take(&mut self, count: usize) -> Vec<usize> {
        if self.n == 0 {
            return Vec::new();
        }
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            if self.cursor == self.order.len() {
                self.order = (0..self.n).collect();
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }

    /// One full shuffled pass, independent of the current position.
    pub fn epoch(&mut self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.n).collect();
        order.shuffle(&mut self.rng);
        order
    }
}

/// Endless stream of batches in a seeded order, reshuffled every epoch.
/// Batches may straddle an epoch boundary; an empty corpus yields nothing.
pub struct BatchStream<'a> {
    sequences: &'a [Vec<u32>],
    layout: VocabLayout,
    batch_size: usize,
    seq_len: usize,
    weighting: Weighting,
    indices: IndexStream,
}

impl<'a> BatchStream<'a> {
    /// `seq_len` is the model context; every sequence must fit it.
    pub fn new(
        sequences: &'a [Vec<u32>],
        layout: VocabLayout,
        batch_size: usize,
        seq_len: usize,
        weighting: Weighting,
        seed: u64,
    ) -> Result<Self> {
        if let Some(s) = sequences.iter().find(|s| s.len() > seq_len + 1) {
            return Err(anole_core::Error::SequenceTooLong { len: s.len() - 1, max: seq_len }.into());
        }
        Ok(Self {
            sequences,
            layout,
            batch_size,
            seq_len,
            weighting,
            indices: IndexStream::new(sequences.len(), seed),
        })
    }

    fn pack(&self, picked: &[usize]) -> Batch {
        let seqs: Vec<Vec<u32>> = picked.iter().map(|&i| self.sequences[i].clone()).collect();
        let (layout, w) = (self.layout, self.weighting);
        Batch::from_sequences(&seqs, self.seq_len, layout.pad(), |t| w.weight(&layout, t))
            .expect("sequence lengths checked in new")
    }

    /// One pass over the corpus in shuffled order; the last batch may be short.
    pub fn epoch(mut self) -> Vec<Batch> {
        let order = self.indices.epoch();
        order.chunks(self.batch_size.max(1)).map(|c| self.pack(c)).collect()
    }
}

impl Iterator for BatchStream<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.sequences.is_empty() || self.batch_size == 0 {
            return None;
        }
        let picked = self.indices.take(self.batch_size);
        Some(self.pack(&picked))
    }
}
