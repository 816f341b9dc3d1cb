use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("input not found: {}", .0.display())]
    InputNotFound(PathBuf),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("duplicate observation for sensor {sensor} at {timestamp} (lines {first_line} and {line})")]
    DuplicateObservation {
        sensor: String,
        timestamp: String,
        first_line: u64,
        line: u64,
    },

    #[error("dataset contains no sensors")]
    NoSensors,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("not enough data: {0}")]
    NotEnoughData(String),

    #[error("sensor {sensor} has no observations at hour {hour:02}:00 to impute from")]
    EmptyImputationPool { sensor: String, hour: u32 },

    #[error("sensor {sensor} has zero standard deviation in the training segment")]
    ZeroStd { sensor: String },

    #[error("series is empty")]
    EmptySeries,

    #[error("series {0} is empty")]
    EmptySeriesInPair(usize),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid distance matrix: {0}")]
    InvalidDistanceMatrix(String),

    #[error("sensor {sensor} has missing or invalid coordinates")]
    InvalidCoordinates { sensor: String },

    #[error("degenerate kernel: {0}")]
    DegenerateKernel(String),

    #[error("invalid graph parameter: {0}")]
    InvalidGraph(String),

    #[error("tape already consumed by a backward pass")]
    StaleTape,

    #[error("training diverged at epoch {epoch}, batch {batch}: loss is {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },

    #[error("singular design matrix: {0}")]
    SingularDesign(String),

    #[error("graph fingerprint mismatch: checkpoint has {expected}, evaluation graph has {found}")]
    FingerprintMismatch { expected: String, found: String },

    #[error("unknown sensor id: {0}")]
    UnknownSensor(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::InputNotFound(path)
        } else {
            Error::Io { path, source }
        }
    }
}
