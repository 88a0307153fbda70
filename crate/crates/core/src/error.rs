use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("document {doc_id}: {message}")]
    InvalidDocument { doc_id: String, message: String },

    #[error("document {doc_id}: overlapping annotations at offsets {first:?} and {second:?}")]
    OverlappingAnnotations {
        doc_id: String,
        first: (usize, usize),
        second: (usize, usize),
    },

    #[error("document {doc_id}: annotation at offset {offset} does not align with a token boundary")]
    Misaligned { doc_id: String, offset: usize },

    #[error("unknown PHI label \"{0}\"")]
    UnknownLabel(String),

    #[error("invalid harmonization rules: {0}")]
    InvalidRules(String),

    #[error("invalid synthetic corpus spec: {0}")]
    InvalidSpec(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid training plan: {0}")]
    InvalidPlan(String),

    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(String),

    #[error("length mismatch: {what} has {got}, expected {expected}")]
    LengthMismatch {
        what: &'static str,
        got: usize,
        expected: usize,
    },

    #[error("domain id {domain_id} out of range for {n_domains} domains")]
    InvalidDomain { domain_id: usize, n_domains: usize },

    #[error("zero-norm column {0} in orthogonality penalty")]
    ZeroNormColumn(usize),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("empty dataset: {0}")]
    EmptyData(String),

    #[error("document sets differ: {0}")]
    DocumentMismatch(String),

    #[error("{0}")]
    Evaluation(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable identifier used as the machine-readable prefix of CLI errors.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Parse { .. } => "parse",
            Error::InvalidDocument { .. } => "invalid-document",
            Error::OverlappingAnnotations { .. } => "overlap",
            Error::Misaligned { .. } => "misaligned",
            Error::UnknownLabel(_) => "unknown-label",
            Error::InvalidRules(_) => "invalid-rules",
            Error::InvalidSpec(_) => "invalid-spec",
            Error::InvalidConfig(_) => "invalid-config",
            Error::InvalidPlan(_) => "invalid-plan",
            Error::NonFiniteGradient(_) => "non-finite-gradient",
            Error::LengthMismatch { .. } => "length-mismatch",
            Error::InvalidDomain { .. } => "invalid-domain",
            Error::ZeroNormColumn(_) => "zero-norm",
            Error::Checkpoint(_) => "checkpoint",
            Error::EmptyData(_) => "empty-data",
            Error::DocumentMismatch(_) => "document-mismatch",
            Error::Evaluation(_) => "evaluation",
            Error::Io { .. } => "io",
        }
    }
}
