//! Training loops, evaluation, checkpoints, metrics and reconstruction dumps.

mod checkpoint;
mod gradcheck;
mod metrics;
mod reconstruct;
mod run;

pub use checkpoint::{Checkpoint, CheckpointError, OptSnapshot, MAGIC, VERSION};
pub use gradcheck::{gradcheck_suite, CheckResult, Precision, GRAD_FLOOR};
pub use metrics::{MetricsLog, MetricsRow, Split as MetricSplit, METRICS_HEADER};
pub use reconstruct::{reconstruct_dump, triptych, write_ppm, DUMP_SCALE, MASK_GRAY};
pub use run::{
    evaluate, finetune_run, pretrain_run, select, EvalResult, FinetuneInit, RunOutcome, RunPaths, EVAL_BATCH,
    VAL_MASK_KEY,
};

use std::path::PathBuf;

use thiserror::Error;

use crate::config::ConfigError;
use crate::data::DataError;
use crate::optim::OptimError;
use crate::patch::PatchError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss {loss} at epoch {epoch}, step {step}; last checkpoint kept")]
    NonFinite { loss: f64, epoch: u64, step: u64 },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Patch(#[from] PatchError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{0}")]
    Invalid(String),
    #[error("I/O on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> TrainError {
    let path = path.into();
    move |source| TrainError::Io { path, source }
}
