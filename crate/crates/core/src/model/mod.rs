//! Encoder, decoder, classification head, initialization, and the analytic
//! parameter and MAC cost model.

mod cost;
mod forward;
mod params;
#[cfg(test)]
mod tests;

use thiserror::Error;

pub use cost::{
    block_macs, block_params, count_macs, count_params, inspect_report, CostBreakdown, CostItem, MacConvention,
    REFERENCE_MACS_G, REFERENCE_PARAMS_M,
};
pub use forward::{
    bind, bind_frozen, block_forward, classify_forward, decoder_forward, embed_tokens, encoder_forward, linear, mae_forward, Fwd,
};
pub use params::{
    init_params, Block, Decoder, Encoder, Linear, ModelParams, Norm, ParamInfo, ParamKind, EMBED_INIT_STD,
};

pub const LN_EPS: f64 = 1e-5;
/// Image channels.
pub const CHANNELS: usize = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("unknown MAC convention `{0}` (expected full or linear_only)")]
    UnknownConvention(String),
}

/// Which parameter set a run uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Pretrain,
    Finetune,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub enc_depth: usize,
    pub dec_depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub patch_side: usize,
    pub image_side: usize,
    pub dropout_p: f64,
    pub n_classes: usize,
    pub mask_ratio: f64,
    pub alpha: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 192,
            enc_depth: 12,
            dec_depth: 4,
            heads: 3,
            mlp_ratio: 2,
            patch_side: 3,
            image_side: 36,
            dropout_p: 0.1,
            n_classes: 10,
            mask_ratio: 0.75,
            alpha: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn n_patches(&self) -> usize {
        let g = self.image_side / self.patch_side;
        g * g
    }

    /// Patches plus the dummy token.
    pub fn n_tokens(&self) -> usize {
        self.n_patches() + 1
    }

    pub fn token_dim(&self) -> usize {
        CHANNELS * self.patch_side * self.patch_side
    }

    pub fn hidden_dim(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.embed_dim == 0 || self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return bad(format!("embed_dim {} not divisible by heads {}", self.embed_dim, self.heads));
        }
        if self.mlp_ratio == 0 {
            return bad("mlp_ratio must be positive".into());
        }
        if self.patch_side == 0 || self.image_side == 0 || !self.image_side.is_multiple_of(self.patch_side) {
            return bad(format!("image_side {} not divisible by patch_side {}", self.image_side, self.patch_side));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!("dropout_p {} outside [0, 1)", self.dropout_p));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return bad(format!("mask_ratio {} outside [0, 1)", self.mask_ratio));
        }
        if self.n_classes == 0 {
            return bad("n_classes must be positive".into());
        }
        if !(self.alpha >= 0.0) {
            return bad(format!("alpha {} must be non-negative", self.alpha));
        }
        Ok(())
    }
}
