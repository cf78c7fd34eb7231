use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unsupported bit width {0}")]
    UnsupportedBits(u32),

    #[error("code {code} at index {index} does not fit in {bits} bits")]
    CodeOutOfRange { index: usize, code: u32, bits: u32 },

    #[error("code {code} at block {block}, position {position} exceeds field maximum {max}")]
    Mixed3OutOfRange {
        block: usize,
        position: usize,
        code: u32,
        max: u32,
    },

    #[error("index {index} out of bounds for length {len}")]
    IndexOutOfBounds { index: usize, len: usize },

    #[error("layout mismatch: {0}")]
    LayoutMismatch(String),

    #[error("empty quantization group")]
    EmptyGroup,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("token {token} out of range for vocabulary of {vocab}")]
    InvalidToken { token: usize, vocab: usize },

    #[error("malformed data: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),

    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
