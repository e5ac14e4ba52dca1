use thiserror::Error;

/// Errors raised across the stabilization pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("input format error: {0}")]
    InputFormat(String),

    #[error("corrupt input: {0}")]
    CorruptInput(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("write error: {0}")]
    Write(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("range error: {0}")]
    Range(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("no optic disc region detected")]
    NoOdr,

    #[error("size error: {0}")]
    Size(String),

    #[error("template too large: side {side} exceeds frame dimension {limit}")]
    TemplateTooLarge { side: usize, limit: usize },

    #[error("unreliable match at frame {frame}: valid fraction {valid_fraction:.3}")]
    UnreliableMatch { frame: usize, valid_fraction: f64 },

    #[error("sequence too short: {0}")]
    TooShort(String),

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("invalid synthetic spec: {0}")]
    Spec(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable machine-readable identifier for the error class.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InputFormat(_) => "input_format",
            Error::CorruptInput(_) => "corrupt_input",
            Error::EmptyInput(_) => "empty_input",
            Error::Write(_) => "write",
            Error::Parse(_) => "parse",
            Error::Range(_) => "range",
            Error::Validation(_) => "validation",
            Error::NoOdr => "no_odr",
            Error::Size(_) => "size",
            Error::TemplateTooLarge { .. } => "template_too_large",
            Error::UnreliableMatch { .. } => "unreliable_match",
            Error::TooShort(_) => "too_short",
            Error::Alignment(_) => "alignment",
            Error::Spec(_) => "spec",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
