use std::path::PathBuf;

/// Errors raised anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("line {line}: expected `token tag`, found {found} column(s)")]
    MalformedLine { line: usize, found: usize },

    #[error("line {line}: invalid BIO tag `{tag}`")]
    InvalidTag { line: usize, tag: String },

    #[error("line {line}: `{tag}` does not continue an entity of the same type")]
    DanglingInside { line: usize, tag: String },

    #[error("corpus contains no sentences")]
    EmptyCorpus,

    #[error("manifest lists no corpora")]
    EmptyManifest,

    #[error("invalid tag sequence at position {position}: `{tag}`")]
    InvalidTagSequence { position: usize, tag: String },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("line {line}: cannot parse `{value}` as a float")]
    UnparsableFloat { line: usize, value: String },

    #[error("non-finite score encountered")]
    NonFiniteScore,

    #[error("tag index {index} out of range for {size} tags")]
    TagIndexOutOfRange { index: usize, size: usize },

    #[error("domain index {index} out of range for {size} domains")]
    DomainIndexOutOfRange { index: usize, size: usize },

    #[error("cache does not belong to the current parameters")]
    StaleCache,

    #[error("domain `{domain}` has {available} eligible sentences, need {needed}")]
    InsufficientSentences {
        domain: String,
        available: usize,
        needed: usize,
    },

    #[error("domain `{domain}` has {available} entity-bearing sentences, need {needed}")]
    NoEntitySentences {
        domain: String,
        available: usize,
        needed: usize,
    },

    #[error("batch size must be at least 1")]
    InvalidBatchSize,

    #[error("non-finite loss on task {task}")]
    NonFiniteLoss { task: String },

    #[error("non-finite gradient in `{0}`")]
    NonFiniteGradient(String),

    #[error("negative loss {0}")]
    NegativeLoss(f64),

    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),

    #[error("repeat {repeat}: {count} adaptation sentence(s) also occur in the test split")]
    TargetLeakage { repeat: usize, count: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("cannot access {path}")]
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
}

pub type Result<T> = std::result::Result<T, Error>;
