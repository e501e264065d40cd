use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied value violates an operation's precondition.
    #[error("invalid input: {0}")]
    Input(String),

    /// An index (layer, head, position, token) is outside its valid range.
    #[error("{what} index {index} out of range (limit {limit})")]
    Index {
        what: &'static str,
        index: usize,
        limit: usize,
    },

    /// The object is not in a state that supports the request.
    #[error("invalid state: {0}")]
    State(String),

    /// A lens or checkpoint was used against a model it was not trained for.
    #[error("model binding mismatch: expected fingerprint {expected}, found {found}")]
    Binding { expected: String, found: String },

    /// Training or evaluation produced a non-finite or undefined quantity.
    #[error("numerical divergence{}: {message}", step.map(|s| format!(" at step {s}")).unwrap_or_default())]
    Divergence { step: Option<usize>, message: String },

    #[error("file not found: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("corrupt file {}: {reason}", path.display())]
    CorruptFile { path: PathBuf, reason: String },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { expected: u32, found: u32 },

    /// Stored content hash disagrees with the hash of the loaded tensors.
    #[error("fingerprint mismatch in {}: header says {stored}, content hashes to {computed}", path.display())]
    Fingerprint {
        path: PathBuf,
        stored: String,
        computed: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn index(what: &'static str, index: usize, limit: usize) -> Self {
        Error::Index { what, index, limit }
    }

    pub(crate) fn corrupt(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::CorruptFile {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Short stable identifier, used for machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Input(_) => "input",
            Error::Index { .. } => "index",
            Error::State(_) => "state",
            Error::Binding { .. } => "binding",
            Error::Divergence { .. } => "divergence",
            Error::MissingFile(_) => "missing_file",
            Error::CorruptFile { .. } => "corrupt_file",
            Error::Version { .. } => "version",
            Error::Fingerprint { .. } => "fingerprint",
            Error::Io(_) => "io",
        }
    }
}
