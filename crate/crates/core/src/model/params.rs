use crate::tensor::{Rng, Scalar, Tensor};

use super::{ModelConfig, Stage};

/// Role of a parameter tensor, used for weight-decay exemption.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    NormGamma,
    NormBeta,
    Position,
    MaskToken,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamInfo {
    pub name: String,
    pub kind: ParamKind,
    /// Layer-wise decay group (encoder and head only).
    pub group: Option<usize>,
}

impl ParamInfo {
    pub fn decays(&self) -> bool {
        !matches!(self.kind, ParamKind::Bias | ParamKind::NormGamma | ParamKind::NormBeta)
    }
}

/// Weight is stored `[in, out]` so that `y = x W + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<P> {
    pub weight: P,
    pub bias: Option<P>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Norm<P> {
    pub gamma: P,
    pub beta: P,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block<P> {
    pub ln1: Norm<P>,
    pub qkv: Linear<P>,
    pub attn_out: Linear<P>,
    pub ln2: Norm<P>,
    pub mlp1: Linear<P>,
    pub mlp2: Linear<P>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder<P> {
    pub patch_embed: Linear<P>,
    pub pos: P,
    pub blocks: Vec<Block<P>>,
    pub norm: Norm<P>,
    pub proj: Linear<P>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoder<P> {
    pub mask_token: P,
    pub pos: P,
    pub blocks: Vec<Block<P>>,
    pub norm: Norm<P>,
    pub proj: Linear<P>,
}

/// The full parameter tree. `P` is a tensor for storage, a graph handle
/// during a forward pass, or any per-parameter payload (gradients, moments).
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<P> {
    pub encoder: Encoder<P>,
    pub decoder: Option<Decoder<P>>,
    pub head: Option<Linear<P>>,
}

type MapFn<'f, 'a, P, Q> = dyn FnMut(&ParamInfo, &'a P) -> Q + 'f;
type MutFn<'f, 'a, P> = dyn FnMut(&ParamInfo, &'a mut P) + 'f;

fn info(name: String, kind: ParamKind, group: Option<usize>) -> ParamInfo {
    ParamInfo { name, kind, group }
}

impl<P> Linear<P> {
    fn map<'a, Q>(&'a self, pre: &str, group: Option<usize>, f: &mut MapFn<'_, 'a, P, Q>) -> Linear<Q> {
        Linear {
            weight: f(&info(format!("{pre}.weight"), ParamKind::Weight, group), &self.weight),
            bias: self
                .bias
                .as_ref()
                .map(|b| f(&info(format!("{pre}.bias"), ParamKind::Bias, group), b)),
        }
    }

    fn for_each_mut<'a>(&'a mut self, pre: &str, group: Option<usize>, f: &mut MutFn<'_, 'a, P>) {
        f(&info(format!("{pre}.weight"), ParamKind::Weight, group), &mut self.weight);
        if let Some(b) = self.bias.as_mut() {
            f(&info(format!("{pre}.bias"), ParamKind::Bias, group), b);
        }
    }
}

impl<P> Norm<P> {
    fn map<'a, Q>(&'a self, pre: &str, group: Option<usize>, f: &mut MapFn<'_, 'a, P, Q>) -> Norm<Q> {
        Norm {
            gamma: f(&info(format!("{pre}.gamma"), ParamKind::NormGamma, group), &self.gamma),
            beta: f(&info(format!("{pre}.beta"), ParamKind::NormBeta, group), &self.beta),
        }
    }

    fn for_each_mut<'a>(&'a mut self, pre: &str, group: Option<usize>, f: &mut MutFn<'_, 'a, P>) {
        f(&info(format!("{pre}.gamma"), ParamKind::NormGamma, group), &mut self.gamma);
        f(&info(format!("{pre}.beta"), ParamKind::NormBeta, group), &mut self.beta);
    }
}

impl<P> Block<P> {
    fn map<'a, Q>(&'a self, pre: &str, group: Option<usize>, f: &mut MapFn<'_, 'a, P, Q>) -> Block<Q> {
        Block {
            ln1: self.ln1.map(&format!("{pre}.ln1"), group, f),
            qkv: self.qkv.map(&format!("{pre}.qkv"), group, f),
            attn_out: self.attn_out.map(&format!("{pre}.attn_out"), group, f),
            ln2: self.ln2.map(&format!("{pre}.ln2"), group, f),
            mlp1: self.mlp1.map(&format!("{pre}.mlp1"), group, f),
            mlp2: self.mlp2.map(&format!("{pre}.mlp2"), group, f),
        }
    }

    fn for_each_mut<'a>(&'a mut self, pre: &str, group: Option<usize>, f: &mut MutFn<'_, 'a, P>) {
        self.ln1.for_each_mut(&format!("{pre}.ln1"), group, f);
        self.qkv.for_each_mut(&format!("{pre}.qkv"), group, f);
        self.attn_out.for_each_mut(&format!("{pre}.attn_out"), group, f);
        self.ln2.for_each_mut(&format!("{pre}.ln2"), group, f);
        self.mlp1.for_each_mut(&format!("{pre}.mlp1"), group, f);
        self.mlp2.for_each_mut(&format!("{pre}.mlp2"), group, f);
    }
}

impl<P> ModelParams<P> {
    /// Number of layer-wise decay groups: embedding, one per block, final
    /// norm and projection, head.
    pub fn group_count(&self) -> usize {
        self.encoder.blocks.len() + 3
    }

    /// Structure-preserving map over every parameter in a fixed order.
    pub fn map<'a, Q>(&'a self, mut f: impl FnMut(&ParamInfo, &'a P) -> Q) -> ModelParams<Q> {
        let f: &mut MapFn<'_, 'a, P, Q> = &mut f;
        let depth = self.encoder.blocks.len();
        let e = &self.encoder;
        let encoder = Encoder {
            patch_embed: e.patch_embed.map("encoder.patch_embed", Some(0), f),
            pos: f(&info("encoder.pos".into(), ParamKind::Position, Some(0)), &e.pos),
            blocks: e
                .blocks
                .iter()
                .enumerate()
                .map(|(i, b)| b.map(&format!("encoder.blocks.{i}"), Some(i + 1), f))
                .collect(),
            norm: e.norm.map("encoder.norm", Some(depth + 1), f),
            proj: e.proj.map("encoder.proj", Some(depth + 1), f),
        };
        let decoder = self.decoder.as_ref().map(|d| Decoder {
            mask_token: f(&info("decoder.mask_token".into(), ParamKind::MaskToken, None), &d.mask_token),
            pos: f(&info("decoder.pos".into(), ParamKind::Position, None), &d.pos),
            blocks: d
                .blocks
                .iter()
                .enumerate()
                .map(|(i, b)| b.map(&format!("decoder.blocks.{i}"), None, f))
                .collect(),
            norm: d.norm.map("decoder.norm", None, f),
            proj: d.proj.map("decoder.proj", None, f),
        });
        let head = self.head.as_ref().map(|h| h.map("head", Some(depth + 2), f));
        ModelParams { encoder, decoder, head }
    }

    /// Mutable visit in the same order as [`ModelParams::map`].
    pub fn for_each_mut<'a>(&'a mut self, mut f: impl FnMut(&ParamInfo, &'a mut P)) {
        let f: &mut MutFn<'_, 'a, P> = &mut f;
        let depth = self.encoder.blocks.len();
        let e = &mut self.encoder;
        e.patch_embed.for_each_mut("encoder.patch_embed", Some(0), f);
        f(&info("encoder.pos".into(), ParamKind::Position, Some(0)), &mut e.pos);
        for (i, b) in e.blocks.iter_mut().enumerate() {
            b.for_each_mut(&format!("encoder.blocks.{i}"), Some(i + 1), f);
        }
        e.norm.for_each_mut("encoder.norm", Some(depth + 1), f);
        e.proj.for_each_mut("encoder.proj", Some(depth + 1), f);
        if let Some(d) = self.decoder.as_mut() {
            f(&info("decoder.mask_token".into(), ParamKind::MaskToken, None), &mut d.mask_token);
            f(&info("decoder.pos".into(), ParamKind::Position, None), &mut d.pos);
            for (i, b) in d.blocks.iter_mut().enumerate() {
                b.for_each_mut(&format!("decoder.blocks.{i}"), None, f);
            }
            d.norm.for_each_mut("decoder.norm", None, f);
            d.proj.for_each_mut("decoder.proj", None, f);
        }
        if let Some(h) = self.head.as_mut() {
            h.for_each_mut("head", Some(depth + 2), f);
        }
    }

    pub fn entries(&self) -> Vec<(ParamInfo, &P)> {
        let mut out = Vec::new();
        self.map(|i, p| out.push((i.clone(), p)));
        out
    }

    pub fn entries_mut(&mut self) -> Vec<(ParamInfo, &mut P)> {
        let mut out = Vec::new();
        self.for_each_mut(|i, p| out.push((i.clone(), p)));
        out
    }
}

impl<T: Scalar> ModelParams<Tensor<T>> {
    pub fn numel(&self) -> usize {
        self.entries().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<Tensor<U>> {
        self.map(|_, t| t.cast())
    }
}

struct Init<'r> {
    rng: &'r mut Rng,
}

impl Init<'_> {
    fn uniform<T: Scalar>(&mut self, shape: &[usize], fan_in: usize) -> Tensor<T> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::of(self.rng.uniform_range(-bound, bound))).collect();
        Tensor::new(shape, data).expect("shape matches data")
    }

    fn normal<T: Scalar>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::of(std * self.rng.normal())).collect();
        Tensor::new(shape, data).expect("shape matches data")
    }

    fn linear<T: Scalar>(&mut self, fan_in: usize, fan_out: usize, bias: bool) -> Linear<Tensor<T>> {
        Linear {
            weight: self.uniform(&[fan_in, fan_out], fan_in),
            bias: bias.then(|| self.uniform(&[fan_out], fan_in)),
        }
    }

    fn norm<T: Scalar>(dim: usize) -> Norm<Tensor<T>> {
        Norm {
            gamma: Tensor::full(&[dim], T::one()),
            beta: Tensor::zeros(&[dim]),
        }
    }

    fn block<T: Scalar>(&mut self, d: usize, hidden: usize) -> Block<Tensor<T>> {
        Block {
            ln1: Self::norm(d),
            qkv: self.linear(d, 3 * d, true),
            attn_out: self.linear(d, d, true),
            ln2: Self::norm(d),
            mlp1: self.linear(d, hidden, true),
            mlp2: self.linear(hidden, d, true),
        }
    }
}

/// Standard deviation of positional embeddings and the mask token at init.
pub const EMBED_INIT_STD: f64 = 0.02;

/// Fresh parameters for `stage`. Pre-training builds encoder and decoder;
/// fine-tuning builds encoder and classification head.
pub fn init_params<T: Scalar>(cfg: &ModelConfig, stage: Stage, rng: &mut Rng) -> ModelParams<Tensor<T>> {
    let (d, n, hidden, tok) = (cfg.embed_dim, cfg.n_tokens(), cfg.hidden_dim(), cfg.token_dim());
    let mut init = Init { rng };
    let encoder = Encoder {
        patch_embed: init.linear(tok, d, false),
        pos: init.normal(&[n, d], EMBED_INIT_STD),
        blocks: (0..cfg.enc_depth).map(|_| init.block(d, hidden)).collect(),
        norm: Init::norm(d),
        proj: init.linear(d, d, false),
    };
    let (decoder, head) = match stage {
        Stage::Pretrain => {
            let decoder = Decoder {
                mask_token: init.normal(&[d], EMBED_INIT_STD),
                pos: init.normal(&[n, d], EMBED_INIT_STD),
                blocks: (0..cfg.dec_depth).map(|_| init.block(d, hidden)).collect(),
                norm: Init::norm(d),
                proj: init.linear(d, tok, false),
            };
            (Some(decoder), None)
        }
        Stage::Finetune => (None, Some(init.linear(d, cfg.n_classes, true))),
    };
    ModelParams { encoder, decoder, head }
}
