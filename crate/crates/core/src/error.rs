use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("missing file: {0}")]
    MissingFile(PathBuf),

    #[error("cannot decode frame {path}: {reason}")]
    UndecodableFrame { path: PathBuf, reason: String },

    #[error("frame timestamps are not strictly increasing at index {index}")]
    NonMonotonicTimestamps { index: usize },

    #[error("empty stream")]
    EmptyStream,

    #[error("invalid manifest: {0}")]
    InvalidManifest(String),

    #[error("unsupported audio encoding: {0}")]
    UnsupportedAudio(String),

    #[error("corrupt audio file {path}: {reason}")]
    CorruptAudio { path: PathBuf, reason: String },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("no rain hint overlaps the stream")]
    NoHintOverlap,

    #[error("no strong reflections; provide more/longer rain hints")]
    NoStrongReflections,

    #[error("k = {k} is invalid for {points} points")]
    InvalidClusterCount { k: usize, points: usize },

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("training failed: {0}")]
    Training(String),

    #[error("gauge log not monotone at row {row}")]
    GaugeNotMonotone { row: usize },

    #[error("invalid gauge log: {0}")]
    InvalidGauge(String),

    #[error("adjustment for event {event} excludes its tips: {reason}")]
    InvalidAdjustment { event: usize, reason: String },

    #[error("invalid metric input: {0}")]
    InvalidMetricInput(String),

    #[error("invalid ET: {0}")]
    InvalidEt(String),

    #[error("ET source unreachable: {0}")]
    EtUnreachable(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("csv error in {context}: {source}")]
    Csv {
        context: String,
        #[source]
        source: csv::Error,
    },

    #[error("json error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("malformed record: {0}")]
    Malformed(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn csv(context: impl Into<String>, source: csv::Error) -> Self {
        Error::Csv {
            context: context.into(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }
}
