use std::path::PathBuf;

/// Errors raised by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An argument violates an operation's precondition.
    #[error("domain error: {0}")]
    Domain(String),

    /// The input is valid in shape but numerically degenerate (e.g. a constant map).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("malformed file {path} ({kind}): {detail}")]
    Format { path: PathBuf, kind: FormatKind, detail: String },

    #[error("training diverged at iteration {iteration}: {detail}")]
    Training { iteration: u64, detail: String },

    #[error("sampling produced non-finite values at step {step}")]
    Sampling { step: usize },

    #[error("I/O error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Class of a file-format failure.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FormatKind {
    BadMagic,
    CorruptHeader,
    ShapeMismatch,
    Truncated,
    ChecksumMismatch,
}

impl std::fmt::Display for FormatKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Self::BadMagic => "bad magic",
            Self::CorruptHeader => "corrupt header",
            Self::ShapeMismatch => "shape mismatch",
            Self::Truncated => "truncated",
            Self::ChecksumMismatch => "checksum mismatch",
        };
        f.write_str(s)
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}

pub(crate) fn io_err(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io { path: path.to_path_buf(), source }
}

pub(crate) fn format_err(path: &std::path::Path, kind: FormatKind, detail: impl Into<String>) -> Error {
    Error::Format { path: path.to_path_buf(), kind, detail: detail.into() }
}
