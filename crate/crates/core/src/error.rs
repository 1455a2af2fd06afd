use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("invalid probe config: {0}")]
    InvalidProbeConfig(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("position {position} exceeds max_position {max_position}")]
    PositionOverflow { position: usize, max_position: usize },

    #[error("token id {token} outside vocabulary of size {vocab_size}")]
    UnknownToken { token: u32, vocab_size: usize },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("example {0} not found in pool")]
    UnknownExample(u64),

    #[error("duplicate example id {0}")]
    DuplicateExample(u64),

    #[error("layer {layer} out of range for a {num_layers}-layer model")]
    LayerOutOfRange { layer: usize, num_layers: usize },

    #[error("head {head} out of range for a {num_heads}-head model")]
    HeadOutOfRange { head: usize, num_heads: usize },

    #[error("yes and no probe tokens must differ (both are {0})")]
    SameProbeTokens(u32),

    #[error("candidate counts {0:?} invalid: {1}")]
    InvalidCounts(Vec<usize>, &'static str),

    #[error("failed to prefill example {index}: {source}")]
    Prefill {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("bad magic bytes: not a pool file")]
    BadMagic,

    #[error("unsupported pool format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("config fingerprint mismatch: cache was built for a different model (file {found}, model {expected})")]
    FingerprintMismatch { expected: String, found: String },

    #[error("truncated pool file: needed {needed} bytes for {what} at offset {offset}")]
    Truncated {
        offset: usize,
        needed: usize,
        what: &'static str,
    },

    #[error("malformed pool file at offset {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
