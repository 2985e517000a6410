//! Training, evaluation, ablation, grid search and latency measurement.

pub mod adam;
pub mod bench;
pub mod grid;
pub mod train;

use std::path::PathBuf;

use thiserror::Error;

use crate::augment::AugmentError;
use crate::data::DataError;
use crate::ig::IgError;
use crate::loss::LossError;
use crate::models::ModelError;
use crate::tensor::TensorError;

pub use adam::{adam_step, AdamHyper, AdamState};
pub use bench::{benchmark_latency, BenchComparison};
pub use grid::{grid_search, GridCell, GridSearchSpace, SeedPolicy};
pub use train::{
    evaluate, run_ablation, train, AblationReport, Classifier, Mode, SoftTargetInput, TrainConfig,
    TrainInputs, TrainOutcome,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("mode {mode} needs {what}")]
    MissingResource { mode: Mode, what: &'static str },
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("{}: {message}", path.display())]
    Resource { path: PathBuf, message: String },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Ig(#[from] IgError),
}
