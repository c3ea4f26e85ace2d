use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{source} ({path})")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] anole_core::Error),

    #[error("{path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("not a checkpoint file (bad magic)")]
    BadMagic,

    #[error("unsupported checkpoint format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("checkpoint truncated while reading {what}")]
    Truncated { what: String },

    #[error("checksum mismatch in section {section}")]
    Checksum { section: String },

    #[error("checkpoint is missing section {0}")]
    MissingSection(String),

    #[error("section {section}: {message}")]
    SectionShape { section: String, message: String },

    #[error("checkpoint header: {0}")]
    Header(String),

    #[error("{path}:{line}: {message}")]
    Manifest { path: PathBuf, line: usize, message: String },

    #[error("config: {0}")]
    Config(String),
}

impl Error {
    /// Stable short identifier for machine-readable diagnostics.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Core(e) => match e {
                anole_core::Error::Divergence { .. } => "divergence",
                anole_core::Error::Shape { .. } => "shape",
                anole_core::Error::InvalidConfig(_) => "invalid_config",
                anole_core::Error::PromptTooLong { .. } => "prompt_too_long",
                _ => "model",
            },
            Error::Image { .. } => "image_format",
            Error::BadMagic | Error::Version { .. } | Error::Truncated { .. } | Error::Header(_) => "checkpoint_format",
            Error::Checksum { .. } => "checksum",
            Error::MissingSection(_) => "missing_section",
            Error::SectionShape { .. } => "section_shape",
            Error::Manifest { .. } => "manifest",
            Error::Config(_) => "invalid_config",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }
}
