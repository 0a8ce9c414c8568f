//! Lightweight masked-autoencoder vision transformer for 32x32 datasets.
//!
//! ```text
//! CIFAR bytes -> augment (flip, random resized crop to 36x36, normalize)
//!   -> 3x3 patches (144) + zero dummy patch (145th)
//!   -> mask 75% of image patches
//!   -> encoder on visible patches + dummy
//!   -> decoder on visible + shared mask token, separate positional table
//!   -> pixel reconstruction, loss = MSE(masked) + alpha * MSE(visible)
//! ```
//!
//! Fine-tuning drops the decoder and classifies from the dummy patch's
//! encoder output.

pub mod config;
pub mod data;
pub mod model;
pub mod optim;
pub mod patch;
pub mod tensor;
pub mod train;
