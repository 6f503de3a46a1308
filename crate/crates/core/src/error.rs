use thiserror::Error;

use crate::SensorId;

#[derive(Debug, Error)]
pub enum CalibError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("degenerate calibration: calibration function has zero derivative")]
    DegenerateCalibration,

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("unknown sensor {0}")]
    UnknownSensor(SensorId),

    #[error("no path to a reference sensor from sensor {sensor} in window {window}")]
    NoPath { sensor: SensorId, window: i64 },

    #[error("non-finite ELBO at step {step} (records {first}..={last})")]
    NonFiniteElbo {
        step: usize,
        first: usize,
        last: usize,
    },

    #[error("{source_name}, line {line}: {message}")]
    Parse {
        source_name: String,
        line: u64,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CalibError>;
