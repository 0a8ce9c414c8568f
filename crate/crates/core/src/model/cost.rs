use std::fmt::Write as _;
use std::str::FromStr;

use super::{ModelConfig, ModelError, Stage};

/// One named line of a parameter or MAC tally.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostItem {
    pub component: String,
    pub count: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostBreakdown {
    pub items: Vec<CostItem>,
}

impl CostBreakdown {
    pub fn total(&self) -> u64 {
        self.items.iter().map(|i| i.count).sum()
    }

    pub fn get(&self, component: &str) -> Option<u64> {
        self.items.iter().find(|i| i.component == component).map(|i| i.count)
    }

    fn push(&mut self, component: impl Into<String>, count: u64) {
        self.items.push(CostItem {
            component: component.into(),
            count,
        });
    }
}

/// Whether attention score and value-mixing products are counted.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MacConvention {
    Full,
    LinearOnly,
}

impl MacConvention {
    pub const ALL: [MacConvention; 2] = [MacConvention::Full, MacConvention::LinearOnly];

    pub fn name(self) -> &'static str {
        match self {
            MacConvention::Full => "full",
            MacConvention::LinearOnly => "linear_only",
        }
    }
}

impl FromStr for MacConvention {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(MacConvention::Full),
            "linear_only" | "linear-only" => Ok(MacConvention::LinearOnly),
            other => Err(ModelError::UnknownConvention(other.to_string())),
        }
    }
}

/// Parameters of one transformer block.
pub fn block_params(cfg: &ModelConfig) -> u64 {
    let d = cfg.embed_dim as u64;
    let h = cfg.hidden_dim() as u64;
    let norms = 2 * 2 * d;
    let qkv = d * 3 * d + 3 * d;
    let out = d * d + d;
    let mlp = d * h + h + h * d + d;
    norms + qkv + out + mlp
}

/// Closed-form parameter tally for the tensors built by `init_params`.
pub fn count_params(cfg: &ModelConfig, stage: Stage) -> CostBreakdown {
    let d = cfg.embed_dim as u64;
    let n = cfg.n_tokens() as u64;
    let tok = cfg.token_dim() as u64;
    let mut c = CostBreakdown { items: Vec::new() };
    c.push("encoder.patch_embed", tok * d);
    c.push("encoder.pos", n * d);
    c.push("encoder.blocks", cfg.enc_depth as u64 * block_params(cfg));
    c.push("encoder.norm", 2 * d);
    c.push("encoder.proj", d * d);
    match stage {
        Stage::Pretrain => {
            c.push("decoder.mask_token", d);
            c.push("decoder.pos", n * d);
            c.push("decoder.blocks", cfg.dec_depth as u64 * block_params(cfg));
            c.push("decoder.norm", 2 * d);
            c.push("decoder.proj", d * tok);
        }
        Stage::Finetune => {
            let k = cfg.n_classes as u64;
            c.push("head", d * k + k);
        }
    }
    c
}

/// MACs of one block over `t` tokens.
pub fn block_macs(cfg: &ModelConfig, t: u64, conv: MacConvention) -> u64 {
    let d = cfg.embed_dim as u64;
    let h = cfg.hidden_dim() as u64;
    let linear = t * d * 3 * d + t * d * d + 2 * t * d * h;
    match conv {
        MacConvention::Full => linear + 2 * t * t * d,
        MacConvention::LinearOnly => linear,
    }
}

/// Closed-form MAC tally of one forward pass for a single image. In
/// pre-training, the encoder sees `seq_len` tokens and the decoder all of
/// them; in fine-tuning, the encoder sees `seq_len` tokens and the head one.
pub fn count_macs(cfg: &ModelConfig, stage: Stage, seq_len: usize, conv: MacConvention) -> CostBreakdown {
    let d = cfg.embed_dim as u64;
    let tok = cfg.token_dim() as u64;
    let t = seq_len as u64;
    let mut c = CostBreakdown { items: Vec::new() };
    c.push("encoder.patch_embed", t * tok * d);
    c.push("encoder.blocks", cfg.enc_depth as u64 * block_macs(cfg, t, conv));
    c.push("encoder.proj", t * d * d);
    match stage {
        Stage::Pretrain => {
            let n = cfg.n_tokens() as u64;
            c.push("decoder.blocks", cfg.dec_depth as u64 * block_macs(cfg, n, conv));
            c.push("decoder.proj", n * d * tok);
        }
        Stage::Finetune => c.push("head", d * cfg.n_classes as u64),
    }
    c
}

/// Reference figures for the fine-tuned classifier.
pub const REFERENCE_PARAMS_M: f64 = 3.64;
pub const REFERENCE_MACS_G: f64 = 0.26;

/// Human-readable cost table for both stages and both MAC conventions.
pub fn inspect_report(cfg: &ModelConfig) -> String {
    let mut s = String::new();
    let n = cfg.n_tokens();
    let visible = n - crate::patch::masked_count(cfg.n_patches(), cfg.mask_ratio);
    for (stage, seq) in [(Stage::Finetune, n), (Stage::Pretrain, visible)] {
        let params = count_params(cfg, stage);
        let _ = writeln!(s, "== {} (encoder tokens: {seq}) ==", stage.name());
        let _ = writeln!(s, "{:<24} {:>14}", "parameters", "count");
        for item in &params.items {
            let _ = writeln!(s, "{:<24} {:>14}", item.component, item.count);
        }
        let _ = writeln!(s, "{:<24} {:>14}  ({:.2} M)", "total", params.total(), params.total() as f64 / 1e6);
        let full = count_macs(cfg, stage, seq, MacConvention::Full);
        let lin = count_macs(cfg, stage, seq, MacConvention::LinearOnly);
        let _ = writeln!(s, "{:<24} {:>14} {:>14}", "MACs", "full", "linear_only");
        for (a, b) in full.items.iter().zip(&lin.items) {
            let _ = writeln!(s, "{:<24} {:>14} {:>14}", a.component, a.count, b.count);
        }
        let _ = writeln!(
            s,
            "{:<24} {:>14} {:>14}  ({:.3} G / {:.3} G)",
            "total",
            full.total(),
            lin.total(),
            full.total() as f64 / 1e9,
            lin.total() as f64 / 1e9
        );
        if stage == Stage::Finetune {
            let pm = params.total() as f64 / 1e6;
            let _ = writeln!(
                s,
                "reference: {REFERENCE_PARAMS_M:.2} M params ({}), {REFERENCE_MACS_G:.2} G MACs",
                if (pm * 100.0).round() / 100.0 == REFERENCE_PARAMS_M { "match" } else { "mismatch" },
            );
            for (conv, total) in [("full", full.total()), ("linear_only", lin.total())] {
                let g = total as f64 / 1e9;
                let _ = writeln!(
                    s,
                    "  {conv}: {g:.3} G is {:.2}x the reference{}",
                    g / REFERENCE_MACS_G,
                    if (g - REFERENCE_MACS_G).abs() < 0.005 { "" } else { " (discrepancy)" }
                );
            }
        }
        s.push('\n');
    }
    s
}
