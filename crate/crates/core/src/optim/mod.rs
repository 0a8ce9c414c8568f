//! Reconstruction and classification losses, AdamW, and the learning-rate
//! schedule.

mod adamw;
mod loss;
mod schedule;
#[cfg(test)]
mod tests;

pub use adamw::{adam_kernel, adamw_step, AdamHyper, OptState};
pub use loss::{cross_entropy, mae_loss, patch_mse};
pub use schedule::{layerwise_factors, lr_at, lr_at_time, Recipe};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("optimizer state does not match parameters: {0}")]
    StateMismatch(String),
    #[error("invalid recipe: {0}")]
    InvalidRecipe(String),
}
