use thiserror::Error;

/// Errors surfaced by model construction, decoding, search, and routing.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),

    #[error("skip mask has {found} bits, model has {expected} sublayers")]
    MaskLength { expected: usize, found: usize },

    #[error("kv cache does not match this forward call: {0}")]
    CacheMismatch(String),

    #[error("prompt is empty")]
    EmptyPrompt,

    #[error("{0} must not be empty")]
    EmptyInput(&'static str),

    #[error("unknown domain {0}")]
    UnknownDomain(usize),

    #[error("operation requires the planted backend")]
    NotPlanted,

    #[error("registry fingerprint {registry} does not match model {model}")]
    FingerprintMismatch { registry: String, model: String },

    #[error("query vector has zero norm")]
    ZeroNorm,

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("need at least {need} vectors for {what}, got {got}")]
    TooFewVectors {
        what: &'static str,
        need: usize,
        got: usize,
    },

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("gram matrix is not positive definite")]
    NotPositiveDefinite,

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
