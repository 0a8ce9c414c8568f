use std::f64::consts::PI;

use super::OptimError;

/// Optimization hyperparameters of one training stage.
#[derive(Clone, Debug, PartialEq)]
pub struct Recipe {
    pub base_lr: f64,
    pub batch_size: usize,
    pub total_epochs: usize,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub min_lr_fraction: f64,
    /// Per-group multiplier base; 1 disables layer-wise decay.
    pub layerwise_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Recipe {
    pub fn pretrain() -> Self {
        Self {
            base_lr: 1.5e-4,
            batch_size: 1408,
            total_epochs: 4000,
            warmup_epochs: 400,
            weight_decay: 0.05,
            min_lr_fraction: 0.0,
            layerwise_decay: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn finetune() -> Self {
        Self {
            base_lr: 1e-3,
            batch_size: 768,
            total_epochs: 300,
            warmup_epochs: 20,
            layerwise_decay: 0.75,
            ..Self::pretrain()
        }
    }

    /// Linear scaling rule: `base_lr * batch_size / 256`.
    pub fn peak_lr(&self) -> f64 {
        self.base_lr * self.batch_size as f64 / 256.0
    }

    pub fn min_lr(&self) -> f64 {
        self.min_lr_fraction * self.peak_lr()
    }

    pub fn validate(&self) -> Result<(), OptimError> {
        let bad = |m: String| Err(OptimError::InvalidRecipe(m));
        if !(self.base_lr > 0.0) || self.batch_size == 0 {
            return bad("base_lr and batch_size must be positive".into());
        }
        if self.total_epochs > 0 && self.warmup_epochs >= self.total_epochs {
            return bad(format!(
                "warmup_epochs {} must be below total_epochs {}",
                self.warmup_epochs, self.total_epochs
            ));
        }
        if !(self.weight_decay >= 0.0) || !(0.0..=1.0).contains(&self.min_lr_fraction) {
            return bad("weight_decay must be non-negative and min_lr_fraction within [0, 1]".into());
        }
        if !(self.layerwise_decay > 0.0 && self.layerwise_decay <= 1.0) {
            return bad(format!("layerwise_decay {} outside (0, 1]", self.layerwise_decay));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("betas must lie in [0, 1) and eps must be positive".into());
        }
        Ok(())
    }
}

/// Learning rate at a continuous step position: linear warmup from 0, then
/// cosine decay to `min_lr_fraction * peak` at the final step.
pub fn lr_at_time(step: f64, steps_per_epoch: usize, recipe: &Recipe) -> f64 {
    let peak = recipe.peak_lr();
    let min = recipe.min_lr();
    let warm = (recipe.warmup_epochs * steps_per_epoch) as f64;
    let total = (recipe.total_epochs * steps_per_epoch) as f64;
    if step < warm {
        return peak * step / warm;
    }
    if total <= warm {
        return peak;
    }
    let progress = ((step - warm) / (total - warm)).min(1.0);
    peak - (peak - min) * 0.5 * (1.0 - (PI * progress).cos())
}

pub fn lr_at(step: u64, steps_per_epoch: usize, recipe: &Recipe) -> f64 {
    lr_at_time(step as f64, steps_per_epoch, recipe)
}

/// `decay^(groups - 1 - g)` for `g` in `0..groups`, input side first.
pub fn layerwise_factors(groups: usize, decay: f64) -> Vec<f64> {
    (0..groups).map(|g| decay.powi((groups - 1 - g) as i32)).collect()
}
