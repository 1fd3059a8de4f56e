use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the harness.
///
/// Variants are grouped by the exit-code category they map to in the CLI
/// (see [`Error::exit_code`]).
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("shape error: expected dimension {expected}, got {actual}")]
    Shape { expected: usize, actual: usize },

    #[error("training error: {0}")]
    Training(String),

    #[error("statistics error: class {class_id}: {reason}")]
    Statistics { class_id: u32, reason: String },

    #[error("numerical error: class {class_id}: {reason}")]
    Numerical { class_id: u32, reason: String },

    #[error("composition error: {0}")]
    Composition(String),

    #[error("prompt error: {0}")]
    Prompt(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("format error: {0}")]
    Format(#[from] FormatError),

    #[error("completion service error: {0}")]
    Service(String),

    #[error("matrix error: {0}")]
    Matrix(String),

    #[error("step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Distinct failure modes of the embedding container and its sidecar.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic bytes {found:?}, expected \"FPEB\"")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported container version {found}, expected {expected}")]
    VersionMismatch { found: u16, expected: u16 },

    #[error("payload length mismatch: header implies {expected} bytes, found {found}")]
    LengthMismatch { expected: u64, found: u64 },

    #[error("metadata has {metadata} records but payload has {payload} samples")]
    CountMismatch { metadata: u64, payload: u64 },

    #[error("malformed metadata line {line}: {reason}")]
    BadMetadata { line: usize, reason: String },

    #[error("malformed manifest line {line}: {reason}")]
    BadManifest { line: usize, reason: String },

    #[error("malformed lexicon line {line}: {reason}")]
    BadLexicon { line: usize, reason: String },

    #[error("malformed report: {0}")]
    BadReport(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn at_step(self, step: usize) -> Self {
        match self {
            already @ Error::AtStep { .. } => already,
            other => Error::AtStep {
                step,
                source: Box::new(other),
            },
        }
    }

    /// The innermost error, skipping step context.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtStep { source, .. } => source.root(),
            other => other,
        }
    }

    /// Process exit code: 2 configuration, 3 protocol, 4 numerical, 5 I/O.
    /// Everything else is reported as a configuration-level failure of the
    /// inputs.
    pub fn exit_code(&self) -> i32 {
        match self.root() {
            Error::Protocol(_) => 3,
            Error::Numerical { .. } | Error::Statistics { .. } => 4,
            Error::Io { .. } | Error::Format(_) | Error::Service(_) => 5,
            _ => 2,
        }
    }
}
