use std::io;

use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("class id {id} out of range for {num_classes} classes")]
    ClassOutOfRange { id: usize, num_classes: usize },
    #[error("kappa {kappa} out of range 1..={max}")]
    KappaOutOfRange { kappa: usize, max: usize },
    #[error("threshold {0} must lie in (0, 1)")]
    InvalidThreshold(f64),
    #[error("oracle selection needs a non-empty ground-truth label set")]
    EmptyOracle,
    #[error("probabilities must lie in [0, 1], got {0}")]
    InvalidProbability(f64),
    #[error("no class has a non-empty union")]
    NoValidClass,
    #[error("no class has a positive sample")]
    NoPositives,
    #[error("{0}")]
    Shape(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid dataset file: {0}")]
    Format(String),
    #[error("training diverged at step {step}: {source}")]
    Diverged { step: usize, source: TensorError },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
