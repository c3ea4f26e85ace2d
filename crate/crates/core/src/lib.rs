//! Core of a token-based multimodal generator.
//!
//! Everything here is pure computation over `alloc` collections: a VQ image
//! tokenizer, a single fused token space for text and image ids, a small
//! decoder-only transformer with hand-written backpropagation, row-selective
//! fine-tuning of the output head, and a grammar-constrained sampler that
//! emits interleaved image-text sequences.
//!
//! File formats, the synthetic corpus and the command line live in the
//! companion `anole` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod decoder;
pub mod error;
pub mod finetune;
pub mod linalg;
pub mod optim;
pub mod real;
pub mod transformer;
pub mod vocab;
pub mod vq;

pub use error::{Error, Result};
pub use real::Real;
