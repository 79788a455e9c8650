use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed file: {0}")]
    MalformedFile(String),

    #[error("label {label} at pixel {index} is out of range for class_count {class_count}")]
    LabelOutOfRange {
        label: u8,
        index: usize,
        class_count: u16,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("sum of particle weights is degenerate ({0})")]
    DegenerateWeights(f64),

    #[error("class {0} does not occur in the map")]
    EmptySupport(u8),

    #[error("angular resultant vanishes; yaw mean is undefined")]
    ZeroResultant,

    #[error("trajectory leaves the world at t = {t} s ({x:.1}, {y:.1})")]
    TrajectoryOutOfBounds { t: f64, x: f64, y: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
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
