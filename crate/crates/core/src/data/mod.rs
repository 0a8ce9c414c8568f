//! CIFAR ingestion and the augmentation pipeline that feeds 36x36 batches.

mod augment;
mod batch;
mod cifar;
pub mod synthetic;

pub use augment::{
    horizontal_flip, random_resized_crop, resize_bilinear, AugmentPolicy, CropWindow, Image, Normalization,
};
pub use batch::{for_each_batch, make_epoch_batches, Batch, BatchMode, EpochBatches};
pub use cifar::{load_cifar, parse_cifar, write_cifar, DatasetKind, ImageRecord, Split, PIXELS_PER_IMAGE};

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: corrupt CIFAR file, expected {expected} bytes (a multiple of {record_len}), found {actual}")]
    CorruptFile {
        path: PathBuf,
        expected: u64,
        actual: u64,
        record_len: usize,
    },
    #[error("{path}: record {record} has label {label}, but the dataset has {classes} classes")]
    LabelOutOfRange {
        path: PathBuf,
        record: usize,
        label: usize,
        classes: usize,
    },
    #[error("no {dataset} {split} files found under {dir}")]
    MissingFiles {
        dir: PathBuf,
        dataset: &'static str,
        split: &'static str,
    },
    #[error("cannot build batches from an empty record list")]
    Empty,
    #[error("invalid augmentation policy: {0}")]
    InvalidPolicy(String),
    #[error("batch size must be at least 1")]
    ZeroBatch,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
