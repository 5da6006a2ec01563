//! Crate-wide error type.

use std::fmt;
use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug)]
pub enum Error {
    /// I/O failure with the path that triggered it.
    Io { path: PathBuf, source: std::io::Error },
    /// A data file line that does not parse or violates a field contract.
    MalformedRecord { path: PathBuf, line: usize, reason: String },
    /// A label that is not part of the configured label set.
    UnknownLabel { label: String },
    /// A label with fewer examples than a split requires.
    InsufficientExamples { label: String, have: usize, need: usize },
    /// An invalid prompt template pattern.
    Template { reason: String },
    /// A prompt that cannot be rendered under the sequence budget.
    Render { reason: String },
    /// Invalid configuration value or unreadable config file.
    Config { reason: String },
    /// Token/vocabulary contract violations (out-of-range ids, oversize vocab).
    Vocab { reason: String },
    /// Label characters missing from a checkpoint vocabulary.
    UnseenLabelChars { chars: String },
    /// A loss or gradient that is not finite.
    NonFinite { what: String },
    /// Cosine or normalization applied to a zero-norm vector.
    ZeroVector,
    /// Mean pooling over a sequence with no non-PAD position.
    AllPadded,
    /// A contrastive batch with fewer than two sentences.
    BatchTooSmall { n: usize },
    /// Momentum coefficient outside [0, 1).
    MomentumRange { value: f64 },
    /// Unreadable or inconsistent checkpoint contents.
    Checkpoint { reason: String },
    /// Paired lists of different lengths.
    LengthMismatch { left: usize, right: usize },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn config(reason: impl Into<String>) -> Self {
        Error::Config { reason: reason.into() }
    }

    /// True for errors the CLI treats as usage errors (exit code 2):
    /// missing files, invalid configuration, bad templates.
    pub fn is_usage(&self) -> bool {
        match self {
            Error::Io { source, .. } => source.kind() == std::io::ErrorKind::NotFound,
            Error::Config { .. } | Error::Template { .. } => true,
            _ => false,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Io { path, source } => write!(f, "{}: {}", path.display(), source),
            Error::MalformedRecord { path, line, reason } => {
                write!(f, "{}:{}: malformed record: {}", path.display(), line, reason)
            }
            Error::UnknownLabel { label } => write!(f, "label {label:?} is not in the label set"),
            Error::InsufficientExamples { label, have, need } => write!(
                f,
                "label {label:?} has {have} examples but the split needs at least {need}"
            ),
            Error::Template { reason } => write!(f, "invalid prompt template: {reason}"),
            Error::Render { reason } => write!(f, "cannot render prompt: {reason}"),
            Error::Config { reason } => write!(f, "invalid config: {reason}"),
            Error::Vocab { reason } => write!(f, "vocabulary error: {reason}"),
            Error::UnseenLabelChars { chars } => {
                write!(f, "label characters not in checkpoint vocabulary: {chars:?}")
            }
            Error::NonFinite { what } => write!(f, "{what} is not finite"),
            Error::ZeroVector => write!(f, "zero-norm vector has no direction"),
            Error::AllPadded => write!(f, "cannot pool a sequence with no non-PAD position"),
            Error::BatchTooSmall { n } => {
                write!(f, "contrastive batch needs at least 2 sentences, got {n}")
            }
            Error::MomentumRange { value } => {
                write!(f, "momentum coefficient must lie in [0, 1), got {value}")
            }
            Error::Checkpoint { reason } => write!(f, "checkpoint error: {reason}"),
            Error::LengthMismatch { left, right } => {
                write!(f, "length mismatch: {left} vs {right}")
            }
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}
