//! Run configuration: built-in defaults, `key = value` files, and overrides.
//!
//! Resolution order is defaults, then the bundled recipe for the stage, then
//! a user file, then command-line overrides. Unknown keys are errors.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

use crate::data::{AugmentPolicy, DatasetKind, Normalization};
use crate::model::{ModelConfig, Stage};
use crate::optim::Recipe;

pub const PRETRAIN_RECIPE: &str = include_str!("../configs/pretrain.cfg");
pub const FINETUNE_RECIPE: &str = include_str!("../configs/finetune.cfg");

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown config key `{key}`{}", line.map(|l| format!(" on line {l}")).unwrap_or_default())]
    UnknownKey { key: String, line: Option<usize> },
    #[error("invalid value `{value}` for `{key}`: {reason}")]
    BadValue { key: String, value: String, reason: String },
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("cannot read config {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// Everything a run needs besides paths.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub stage: Stage,
    pub model: ModelConfig,
    pub recipe: Recipe,
    pub dataset: DatasetKind,
    pub seed: u64,
    pub flip_prob: f64,
    pub crop_scale_min: f64,
    pub crop_scale_max: f64,
    pub crop_ratio_min: f64,
    pub crop_ratio_max: f64,
    pub norm_mean: f64,
    pub norm_std: f64,
    /// Train-time flip and crop; off means the eval pipeline is used.
    pub augment: bool,
    pub checkpoint_every: usize,
    pub dump_every: usize,
    pub dump_images: usize,
    /// Leading records of the train split to use; 0 means all.
    pub train_subset: usize,
    pub val_subset: usize,
    /// Validation cadence in epochs; 0 disables validation.
    pub val_every: usize,
    /// End this invocation after this many epochs; 0 means run to the end.
    pub stop_after: usize,
    pub deterministic: bool,
    explicit: BTreeSet<String>,
}

const KEYS: &[&str] = &[
    "embed_dim",
    "enc_depth",
    "dec_depth",
    "heads",
    "mlp_ratio",
    "patch_side",
    "image_side",
    "dropout_p",
    "n_classes",
    "mask_ratio",
    "alpha",
    "optimizer",
    "lr_schedule",
    "base_lr",
    "batch_size",
    "total_epochs",
    "warmup_epochs",
    "weight_decay",
    "min_lr_fraction",
    "layerwise_decay",
    "beta1",
    "beta2",
    "eps",
    "dataset",
    "seed",
    "flip_prob",
    "crop_scale_min",
    "crop_scale_max",
    "crop_ratio_min",
    "crop_ratio_max",
    "norm_mean",
    "norm_std",
    "augment",
    "checkpoint_every",
    "dump_every",
    "dump_images",
    "train_subset",
    "val_subset",
    "val_every",
    "stop_after",
    "deterministic",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
        reason: e.to_string(),
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(ConfigError::BadValue {
            key: key.into(),
            value: value.into(),
            reason: "expected true or false".into(),
        }),
    }
}

fn expect_literal(key: &str, value: &str, allowed: &str) -> Result<(), ConfigError> {
    if value.eq_ignore_ascii_case(allowed) {
        Ok(())
    } else {
        Err(ConfigError::BadValue {
            key: key.into(),
            value: value.into(),
            reason: format!("only `{allowed}` is supported"),
        })
    }
}

impl RunConfig {
    /// Built-in defaults with the bundled recipe for `stage` applied.
    pub fn defaults(stage: Stage) -> Self {
        let recipe = match stage {
            Stage::Pretrain => Recipe::pretrain(),
            Stage::Finetune => Recipe::finetune(),
        };
        let policy = match stage {
            Stage::Pretrain => AugmentPolicy::pretrain(),
            Stage::Finetune => AugmentPolicy::finetune(),
        };
        let mut cfg = Self {
            stage,
            model: ModelConfig::default(),
            recipe,
            dataset: DatasetKind::Cifar10,
            seed: 0,
            flip_prob: policy.flip_prob,
            crop_scale_min: policy.crop_scale.0,
            crop_scale_max: policy.crop_scale.1,
            crop_ratio_min: policy.crop_ratio.0,
            crop_ratio_max: policy.crop_ratio.1,
            norm_mean: policy.norm.mean as f64,
            norm_std: policy.norm.std as f64,
            augment: true,
            checkpoint_every: 100,
            dump_every: 100,
            dump_images: 8,
            train_subset: 0,
            val_subset: 0,
            val_every: 1,
            stop_after: 0,
            deterministic: false,
            explicit: BTreeSet::new(),
        };
        let bundled = match stage {
            Stage::Pretrain => PRETRAIN_RECIPE,
            Stage::Finetune => FINETUNE_RECIPE,
        };
        cfg.apply_text(bundled).expect("bundled recipe parses");
        cfg.explicit.clear();
        cfg
    }

    pub fn keys() -> &'static [&'static str] {
        KEYS
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        let m = &mut self.model;
        let r = &mut self.recipe;
        match key {
            "embed_dim" => m.embed_dim = parse(key, v)?,
            "enc_depth" => m.enc_depth = parse(key, v)?,
            "dec_depth" => m.dec_depth = parse(key, v)?,
            "heads" => m.heads = parse(key, v)?,
            "mlp_ratio" => m.mlp_ratio = parse(key, v)?,
            "patch_side" => m.patch_side = parse(key, v)?,
            "image_side" => m.image_side = parse(key, v)?,
            "dropout_p" => m.dropout_p = parse(key, v)?,
            "n_classes" => m.n_classes = parse(key, v)?,
            "mask_ratio" => m.mask_ratio = parse(key, v)?,
            "alpha" => m.alpha = parse(key, v)?,
            "optimizer" => expect_literal(key, v, "adamw")?,
            "lr_schedule" => expect_literal(key, v, "cosine")?,
            "base_lr" => r.base_lr = parse(key, v)?,
            "batch_size" => r.batch_size = parse(key, v)?,
            "total_epochs" => r.total_epochs = parse(key, v)?,
            "warmup_epochs" => r.warmup_epochs = parse(key, v)?,
            "weight_decay" => r.weight_decay = parse(key, v)?,
            "min_lr_fraction" => r.min_lr_fraction = parse(key, v)?,
            "layerwise_decay" => r.layerwise_decay = parse(key, v)?,
            "beta1" => r.beta1 = parse(key, v)?,
            "beta2" => r.beta2 = parse(key, v)?,
            "eps" => r.eps = parse(key, v)?,
            "dataset" => {
                self.dataset = DatasetKind::parse(v).ok_or_else(|| ConfigError::BadValue {
                    key: key.into(),
                    value: v.into(),
                    reason: "expected c10 or c100".into(),
                })?
            }
            "seed" => self.seed = parse(key, v)?,
            "flip_prob" => self.flip_prob = parse(key, v)?,
            "crop_scale_min" => self.crop_scale_min = parse(key, v)?,
            "crop_scale_max" => self.crop_scale_max = parse(key, v)?,
            "crop_ratio_min" => self.crop_ratio_min = parse(key, v)?,
            "crop_ratio_max" => self.crop_ratio_max = parse(key, v)?,
            "norm_mean" => self.norm_mean = parse(key, v)?,
            "norm_std" => self.norm_std = parse(key, v)?,
            "augment" => self.augment = parse_bool(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "dump_every" => self.dump_every = parse(key, v)?,
            "dump_images" => self.dump_images = parse(key, v)?,
            "train_subset" => self.train_subset = parse(key, v)?,
            "val_subset" => self.val_subset = parse(key, v)?,
            "val_every" => self.val_every = parse(key, v)?,
            "stop_after" => self.stop_after = parse(key, v)?,
            "deterministic" => self.deterministic = parse_bool(key, v)?,
            _ => {
                return Err(ConfigError::UnknownKey {
                    key: key.to_string(),
                    line: None,
                })
            }
        }
        self.explicit.insert(key.to_string());
        Ok(())
    }

    /// Applies a `key = value` document; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            })?;
            self.set(key.trim(), value).map_err(|e| match e {
                ConfigError::UnknownKey { key, .. } => ConfigError::UnknownKey { key, line: Some(i + 1) },
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        self.apply_text(&text)
    }

    /// Applies a single `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<(), ConfigError> {
        let (key, value) = kv.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line: 0,
            text: kv.to_string(),
        })?;
        self.set(key.trim(), value)
    }

    /// Derives dependent values and checks consistency. `n_classes` follows
    /// the dataset unless set explicitly, in which case they must agree.
    pub fn resolve(&mut self) -> Result<(), ConfigError> {
        let classes = self.dataset.classes();
        if self.explicit.contains("n_classes") && self.model.n_classes != classes {
            return Err(ConfigError::Invalid(format!(
                "n_classes = {} but dataset {} has {classes} classes",
                self.model.n_classes,
                self.dataset.name()
            )));
        }
        self.model.n_classes = classes;
        self.validate()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.recipe.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.policy().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.norm_std <= 0.0 {
            return Err(ConfigError::Invalid("norm_std must be positive".into()));
        }
        Ok(())
    }

    pub fn policy(&self) -> AugmentPolicy {
        AugmentPolicy {
            flip_prob: self.flip_prob,
            crop_scale: (self.crop_scale_min, self.crop_scale_max),
            crop_ratio: (self.crop_ratio_min, self.crop_ratio_max),
            output_side: self.model.image_side,
            norm: Normalization {
                mean: self.norm_mean as f32,
                std: self.norm_std as f32,
            },
        }
    }

    /// Current value of a config key in file syntax.
    pub fn get(&self, key: &str) -> Option<String> {
        KEYS.contains(&key).then(|| self.value_of(key))
    }

    fn value_of(&self, key: &str) -> String {
        let (m, r) = (&self.model, &self.recipe);
        match key {
            "embed_dim" => m.embed_dim.to_string(),
            "enc_depth" => m.enc_depth.to_string(),
            "dec_depth" => m.dec_depth.to_string(),
            "heads" => m.heads.to_string(),
            "mlp_ratio" => m.mlp_ratio.to_string(),
            "patch_side" => m.patch_side.to_string(),
            "image_side" => m.image_side.to_string(),
            "dropout_p" => m.dropout_p.to_string(),
            "n_classes" => m.n_classes.to_string(),
            "mask_ratio" => m.mask_ratio.to_string(),
            "alpha" => m.alpha.to_string(),
            "optimizer" => "adamw".into(),
            "lr_schedule" => "cosine".into(),
            "base_lr" => r.base_lr.to_string(),
            "batch_size" => r.batch_size.to_string(),
            "total_epochs" => r.total_epochs.to_string(),
            "warmup_epochs" => r.warmup_epochs.to_string(),
            "weight_decay" => r.weight_decay.to_string(),
            "min_lr_fraction" => r.min_lr_fraction.to_string(),
            "layerwise_decay" => r.layerwise_decay.to_string(),
            "beta1" => r.beta1.to_string(),
            "beta2" => r.beta2.to_string(),
            "eps" => r.eps.to_string(),
            "dataset" => self.dataset.name().into(),
            "seed" => self.seed.to_string(),
            "flip_prob" => self.flip_prob.to_string(),
            "crop_scale_min" => self.crop_scale_min.to_string(),
            "crop_scale_max" => self.crop_scale_max.to_string(),
            "crop_ratio_min" => self.crop_ratio_min.to_string(),
            "crop_ratio_max" => self.crop_ratio_max.to_string(),
            "norm_mean" => self.norm_mean.to_string(),
            "norm_std" => self.norm_std.to_string(),
            "augment" => self.augment.to_string(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            "dump_every" => self.dump_every.to_string(),
            "dump_images" => self.dump_images.to_string(),
            "train_subset" => self.train_subset.to_string(),
            "val_subset" => self.val_subset.to_string(),
            "val_every" => self.val_every.to_string(),
            "stop_after" => self.stop_after.to_string(),
            "deterministic" => self.deterministic.to_string(),
            _ => unreachable!("every listed key has a value"),
        }
    }

    /// The full resolved configuration as a `key = value` document that
    /// parses back to an equal configuration.
    pub fn to_text(&self) -> String {
        let mut s = format!("# stage: {}\n", self.stage.name());
        for key in KEYS {
            let _ = writeln!(s, "{key} = {}", self.value_of(key));
        }
        s
    }

    /// Parses a document produced by [`RunConfig::to_text`].
    pub fn from_text(stage: Stage, text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::defaults(stage);
        cfg.apply_text(text)?;
        cfg.explicit.clear();
        cfg.validate()?;
        Ok(cfg)
    }
}
