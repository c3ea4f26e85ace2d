//! Host-side companion to `anole-core`: PPM images, checkpoints, the JSONL
//! manifest, a synthetic corpus, run configuration and the training and
//! generation pipeline behind the `anole` binary.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod manifest;
pub mod ingest;
pub mod pipeline;
pub mod ppm;
pub mod report;
pub mod synth;

pub use error::{Error, Result};
