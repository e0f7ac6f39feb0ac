use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("duplicate relation id `{0}` in label dictionary")]
    DuplicateRelation(String),

    #[error("relation `{0}` has an empty label text")]
    EmptyLabel(String),

    #[error("relation id `{0}` is not in the label dictionary")]
    UnknownRelation(String),

    #[error("invalid entity span in {instance}: {detail}")]
    InvalidSpan { instance: String, detail: String },

    #[error("{instance}: entity markers need {needed} positions but max_seq_len is {max}")]
    MarkersDoNotFit {
        instance: String,
        needed: usize,
        max: usize,
    },

    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },

    #[error("zero-norm {what} at row {row}")]
    ZeroNorm { what: &'static str, row: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("malformed {what}: {detail}")]
    Parse { what: &'static str, detail: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{}: {source}", path.display())]
    File {
        path: std::path::PathBuf,
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn parse(what: &'static str, detail: impl std::fmt::Display) -> Self {
        Error::Parse {
            what,
            detail: detail.to_string(),
        }
    }

    /// Reads a whole text file, naming it in the error.
    pub(crate) fn read_file(path: &std::path::Path) -> Result<String> {
        std::fs::read_to_string(path).map_err(|source| Error::File {
            path: path.to_path_buf(),
            source,
        })
    }

    /// True for failures caused by the numbers themselves (NaN/inf) rather
    /// than by the inputs or the environment.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite(_))
    }
}
