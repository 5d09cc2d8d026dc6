//! Dimensionality reduction, balanced sampling, random forests, metrics and
//! the evaluation protocols built on them.

use thiserror::Error;

use crate::raster::RasterError;

pub mod eval;
pub mod forest;
pub mod metrics;
pub mod pca;
pub mod sampling;

pub use eval::{
    run_loocv, run_split_eval, Dataset, EvalConfig, EvalReport, FittedModel, ModelFile, RunResult, Sample, Task,
    TaskSpec, MODEL_FORMAT_VERSION,
};
pub use forest::{argmax, train_forest, train_tree, Classifier, Forest, ForestParams, Node, Prediction, Tree};
pub use metrics::{compute_metrics, BinaryMetrics, ConfusionMatrix, MeanStd};
pub use pca::{pca_fit, PcaModel};
pub use sampling::{balanced_sample, derive_seed};

#[derive(Debug, Error)]
pub enum LearnError {
    #[error("k = {k} is outside 1..={max}")]
    InvalidK { k: usize, max: usize },
    #[error("expected {expected} features, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("missing class: {0}")]
    MissingClass(String),
    #[error("confusion matrix is empty")]
    EmptyConfusion,
    #[error("missing split assignments: {0}")]
    MissingSplit(String),
    #[error("feature names do not match the model")]
    NameMismatch,
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Raster(#[from] RasterError),
}
