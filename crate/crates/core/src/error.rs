//! Error type shared by every module of the crate.

use std::path::PathBuf;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    // numeric kernels
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("cosine similarity of a zero-norm vector")]
    ZeroNormVector,
    #[error("empty input")]
    EmptyInput,
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    // model engine
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("manifest mismatch: {0}")]
    ManifestMismatch(String),
    #[error("truncated blob: manifest needs {needed} bytes, blob has {actual}")]
    TruncatedBlob { needed: usize, actual: usize },
    #[error("unknown tensor name `{0}`")]
    UnknownTensorName(String),
    #[error("token id {token} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },
    #[error("sequence of length {len} exceeds maximum {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("index out of range: {0}")]
    IndexOutOfRange(String),
    #[error("more than one patch at layer {layer}, position {position}")]
    DuplicatePatchSite { layer: usize, position: usize },

    // demo construction
    #[error("invalid demo config: {0}")]
    InvalidConfig(String),
    #[error("residual width {available} too small, layout needs {needed}")]
    SubspaceOverflow { needed: usize, available: usize },
    #[error("unknown language `{0}`")]
    UnknownLanguage(String),

    // corpus
    #[error("invalid generation config: {0}")]
    InvalidGenConfig(String),
    #[error("{path}:{line}: {reason}")]
    MalformedLine {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("corpus is not parallel at id `{id}`: {reason}")]
    NonParallel { id: String, reason: String },
    #[error("duplicate id `{0}`")]
    DuplicateId(String),
    #[error("unknown token `{0}`")]
    UnknownToken(String),

    // eval / align / patching
    #[error("decision records refer to different ids: `{0}` vs `{1}`")]
    IdMismatch(String, String),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty instance subset")]
    EmptySubset,
    #[error("empty group: {0}")]
    EmptyGroup(&'static str),
    #[error("no eligible control donor for `{0}`")]
    NoEligibleDonor(String),
    #[error("empty summary cell: {0}")]
    EmptyCell(String),
    #[error("summary cells do not match: {0}")]
    CellMismatch(String),
    #[error("invalid proportion counts: {0}")]
    InvalidCounts(String),

    // pipeline
    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),
    #[error("refusing to overwrite {} (use --force)", .0.display())]
    WouldOverwrite(PathBuf),
    #[error("transfer-failure set is empty; nothing to patch")]
    EmptyTfSet,

    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
