use thiserror::Error;

/// Structural problems with a single annotation record.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RecordError {
    #[error("malformed record: {0}")]
    Malformed(String),
    #[error("span [{start}, {end}) out of range for {n_tokens} tokens")]
    SpanOutOfRange { start: usize, end: usize, n_tokens: usize },
    #[error("more than one entity is marked as target")]
    MultipleTargets,
    #[error("no entity is marked as target")]
    NoTarget,
    #[error("target entity must reference exactly the target object {expected}")]
    TargetMismatch { expected: i64 },
    #[error("spans [{0}, {1}) and [{2}, {3}) overlap")]
    OverlappingSpans(usize, usize, usize, usize),
    #[error("entity has no objects or repeated object ids")]
    BadObjectList,
    #[error("utterance has no tokens")]
    EmptyTokens,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {source}")]
    Record {
        line: usize,
        #[source]
        source: RecordError,
    },
    #[error(transparent)]
    Invalid(#[from] RecordError),
    #[error("boxes must be axis-aligned (yaw = 0) for IoU")]
    NonAxisAligned,
    #[error("object {0} not found in scene")]
    UnknownObject(i64),
    #[error("scene {0} not found")]
    MissingScene(String),
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("target values must be 0 or 1")]
    NonBinaryTarget,
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("index {index} out of range for table of {size} rows")]
    VocabOverflow { index: usize, size: usize },
    #[error("token {0:?} is not in the vocabulary")]
    TokenOutOfVocab(String),
    #[error("proposal list is empty")]
    EmptyProposals,
    #[error("candidate has no references")]
    EmptyReference,
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),
    #[error("generation retry budget exhausted: {0}")]
    GenerationExhausted(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    /// True for errors caused by invalid input data rather than I/O or bugs.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Io(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
