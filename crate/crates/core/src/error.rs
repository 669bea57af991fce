use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed MIDI at byte {offset}: {message}")]
    MidiParse { offset: usize, message: String },

    #[error("unsupported meter {0} (only 2/4 and 4/4 are accepted)")]
    UnsupportedMeter(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("{what} index {index} out of range (len {len})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("{what}: expected {expected}, found {found}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("phrase {index} ('{label}', {length} bars) has no candidate in the database")]
    NoCandidates {
        index: usize,
        label: char,
        length: usize,
    },

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    /// True for failures caused by the filesystem rather than by the input's content.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io(_))
    }
}
