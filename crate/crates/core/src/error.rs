use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("MissingSubject: observation references unknown subject id {id:?}")]
    MissingSubject { id: String },

    #[error("DuplicateSubject: subject id {id:?} appears more than once")]
    DuplicateSubject { id: String },

    #[error("BadGenotype: {context}: value {value:?} is not one of 0, 1, 2")]
    BadGenotype { context: String, value: String },

    #[error("RaggedRow: {context}: expected {expected} columns, found {found}")]
    RaggedRow {
        context: String,
        expected: usize,
        found: usize,
    },

    #[error("BadHeader: {0}")]
    BadHeader(String),

    #[error("NonFiniteValue: {0}")]
    NonFiniteValue(String),

    #[error("InvalidObservation: {0}")]
    InvalidObservation(String),

    #[error("LengthMismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },

    #[error("NonPositiveVariance: {0}")]
    NonPositiveVariance(String),

    #[error("DegenerateCohort: {0}")]
    DegenerateCohort(String),

    #[error("DegenerateDesign: {0}")]
    DegenerateDesign(String),

    #[error("InsufficientData: {0}")]
    InsufficientData(String),

    #[error("SingularV: {0}")]
    SingularV(String),

    #[error("NotConverged: {0}")]
    NotConverged(String),

    #[error("DimensionMismatch: {0}")]
    DimensionMismatch(String),

    #[error("UnconvergedModel: model did not converge; pass allow_unconverged to predict anyway")]
    UnconvergedModel,

    #[error("InvalidRequest: {0}")]
    InvalidRequest(String),

    #[error("TooFewSamples: need at least {needed} training fields, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("NotInvertible: fixed-point inversion residual {residual:.4} px")]
    NotInvertible { residual: f64 },

    #[error("InvalidScenario: {0}")]
    InvalidScenario(String),

    #[error("ZeroTruth: relative error undefined for a zero reference value")]
    ZeroTruth,

    #[error("Parse: {path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("Io: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("Json: {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("Config: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    /// Attach a file path to errors raised while parsing an in-memory reader.
    pub(crate) fn in_file(self, path: &std::path::Path) -> Self {
        match self {
            Error::Parse { line, msg, .. } => Error::Parse {
                path: path.to_path_buf(),
                line,
                msg,
            },
            Error::RaggedRow {
                context,
                expected,
                found,
            } => Error::RaggedRow {
                context: format!("{}: {}", path.display(), context),
                expected,
                found,
            },
            Error::BadGenotype { context, value } => Error::BadGenotype {
                context: format!("{}: {}", path.display(), context),
                value,
            },
            Error::NonFiniteValue(msg) => {
                Error::NonFiniteValue(format!("{}: {}", path.display(), msg))
            }
            Error::BadHeader(msg) => Error::BadHeader(format!("{}: {}", path.display(), msg)),
            other => other,
        }
    }
}
