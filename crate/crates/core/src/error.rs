use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("input shape mismatch: expected {expected}, found {found}")]
    Shape { expected: String, found: String },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("token id {id} out of range (limit {limit})")]
    TokenRange { id: u32, limit: u32 },

    #[error("training diverged at step {step} (learning rate {learning_rate}, loss {loss})")]
    Divergence { step: u64, learning_rate: f64, loss: f64 },

    #[error("byte {byte:#04x} at offset {offset} is outside the text vocabulary")]
    Tokenization { byte: u8, offset: usize },

    #[error("parse error at position {position}: {reason}")]
    Parse { position: usize, reason: &'static str },

    #[error("sequence length {len} exceeds maximum {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("loss mask selects no positions")]
    EmptyLoss,

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("trainable mask covers {mask} rows but the model vocabulary has {vocab}")]
    MaskMismatch { mask: usize, vocab: usize },

    #[error("vocabulary layout has {layout} ids but the model was built for {model}")]
    LayoutMismatch { layout: usize, model: usize },

    #[error("no token is allowed in the current decoder state")]
    DecodeStuck,

    #[error("prompt needs {needed} tokens but the budget is {budget}")]
    PromptTooLong { needed: usize, budget: usize },

    #[error("document contains an image but no image tokenizer was supplied")]
    MissingImageTokenizer,
}

pub(crate) fn shape_err(expected: impl core::fmt::Display, found: impl core::fmt::Display) -> Error {
    Error::Shape {
        expected: alloc::format!("{expected}"),
        found: alloc::format!("{found}"),
    }
}
