use crate::patch::{assemble_decoder_tokens, gather_visible, MaskPlan, PatchError};
use crate::tensor::{Graph, Mode, Result, Rng, Scalar, StreamLabel, Tensor, TensorError, Var};

use super::{Block, Decoder, Encoder, Linear, ModelConfig, ModelParams, Norm, LN_EPS};

/// Per-pass settings: train/eval mode, the dropout stream, and an optional
/// sink collecting every attention node; read its probabilities with
/// [`Graph::attention_probs`] before calling `backward`.
pub struct Fwd {
    pub mode: Mode,
    pub rng: Rng,
    pub attn_probe: Option<Vec<Var>>,
}

impl Fwd {
    pub fn eval() -> Self {
        Self {
            mode: Mode::Eval,
            rng: Rng::new(0, StreamLabel::Dropout),
            attn_probe: None,
        }
    }

    pub fn train(rng: Rng) -> Self {
        Self {
            mode: Mode::Train,
            rng,
            attn_probe: None,
        }
    }

    pub fn with_probe(mut self) -> Self {
        self.attn_probe = Some(Vec::new());
        self
    }
}

/// Registers every parameter tensor as a trainable graph leaf.
pub fn bind<T: Scalar>(g: &mut Graph<T>, params: &ModelParams<Tensor<T>>) -> ModelParams<Var> {
    params.map(|_, t| g.param(t))
}

/// Registers every parameter tensor as a constant, for gradient-free passes.
pub fn bind_frozen<T: Scalar>(g: &mut Graph<T>, params: &ModelParams<Tensor<T>>) -> ModelParams<Var> {
    params.map(|_, t| g.constant(t.shape(), t.data().to_vec()).expect("consistent tensor"))
}

pub fn linear<T: Scalar>(g: &mut Graph<T>, x: Var, p: &Linear<Var>) -> Result<Var> {
    let y = g.matmul(x, p.weight)?;
    match p.bias {
        Some(b) => g.add(y, b),
        None => Ok(y),
    }
}

fn norm<T: Scalar>(g: &mut Graph<T>, x: Var, p: &Norm<Var>) -> Result<Var> {
    g.layer_norm(x, p.gamma, p.beta, LN_EPS)
}

/// Multi-head scaled dot-product self-attention on `[B, T, D]`.
fn attention<T: Scalar>(g: &mut Graph<T>, x: Var, p: &Block<Var>, heads: usize, fwd: &mut Fwd) -> Result<Var> {
    let qkv = linear(g, x, &p.qkv)?;
    let mixed = g.attention(qkv, heads)?;
    if let Some(probe) = fwd.attn_probe.as_mut() {
        probe.push(mixed);
    }
    linear(g, mixed, &p.attn_out)
}

/// Pre-norm residual block: attention, then a ReLU MLP with dropout after
/// both linears.
pub fn block_forward<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    p: &Block<Var>,
    cfg: &ModelConfig,
    fwd: &mut Fwd,
) -> Result<Var> {
    let shape = g.shape(x);
    if shape.len() != 3 || shape[1] == 0 || shape[2] != cfg.embed_dim {
        return Err(TensorError::ShapeMismatch {
            op: "block_forward",
            lhs: shape.to_vec(),
            rhs: vec![cfg.embed_dim],
        });
    }
    let h = norm(g, x, &p.ln1)?;
    let a = attention(g, h, p, cfg.heads, fwd)?;
    let x = g.add(x, a)?;
    let h = norm(g, x, &p.ln2)?;
    let h = linear(g, h, &p.mlp1)?;
    let h = g.relu(h);
    let h = g.dropout(h, cfg.dropout_p, fwd.mode, &mut fwd.rng)?;
    let h = linear(g, h, &p.mlp2)?;
    let h = g.dropout(h, cfg.dropout_p, fwd.mode, &mut fwd.rng)?;
    g.add(x, h)
}

/// Token embedding before the blocks: patch projection plus the positional
/// rows of each token's original index.
pub fn embed_tokens<T: Scalar>(g: &mut Graph<T>, tokens: Var, indices: &[Vec<usize>], enc: &Encoder<Var>) -> Result<Var> {
    let shape = g.shape(tokens).to_vec();
    if shape.len() != 3 || indices.len() != shape[0] || indices.iter().any(|i| i.len() != shape[1]) {
        return Err(TensorError::ShapeMismatch {
            op: "embed_tokens",
            lhs: shape,
            rhs: vec![indices.len(), indices.first().map_or(0, Vec::len)],
        });
    }
    let e = linear(g, tokens, &enc.patch_embed)?;
    let d = *g.shape(e).last().expect("rank 3");
    let flat: Vec<usize> = indices.iter().flatten().copied().collect();
    let pos = g.gather_rows(enc.pos, &flat)?;
    let pos = g.reshape(pos, &[shape[0], shape[1], d])?;
    g.add(e, pos)
}

/// `[B, V, token_dim]` with original indices -> `[B, V, D]`.
pub fn encoder_forward<T: Scalar>(
    g: &mut Graph<T>,
    tokens: Var,
    indices: &[Vec<usize>],
    enc: &Encoder<Var>,
    cfg: &ModelConfig,
    fwd: &mut Fwd,
) -> Result<Var> {
    let mut x = embed_tokens(g, tokens, indices, enc)?;
    for b in &enc.blocks {
        x = block_forward(g, x, b, cfg, fwd)?;
    }
    let x = norm(g, x, &enc.norm)?;
    linear(g, x, &enc.proj)
}

/// `[B, N, D]` assembled tokens -> `[B, N, token_dim]` pixel predictions.
pub fn decoder_forward<T: Scalar>(
    g: &mut Graph<T>,
    tokens: Var,
    dec: &Decoder<Var>,
    cfg: &ModelConfig,
    fwd: &mut Fwd,
) -> Result<Var> {
    let mut x = tokens;
    for b in &dec.blocks {
        x = block_forward(g, x, b, cfg, fwd)?;
    }
    let x = norm(g, x, &dec.norm)?;
    linear(g, x, &dec.proj)
}

/// All `N` tokens through the encoder; the dummy token's output feeds the head.
pub fn classify_forward<T: Scalar>(
    g: &mut Graph<T>,
    tokens: Var,
    params: &ModelParams<Var>,
    cfg: &ModelConfig,
    fwd: &mut Fwd,
) -> Result<Var> {
    let head = params.head.as_ref().ok_or(TensorError::InvalidArgument {
        op: "classify_forward",
        msg: "model has no classification head".into(),
    })?;
    let shape = g.shape(tokens).to_vec();
    let n = cfg.n_tokens();
    if shape.len() != 3 || shape[1] != n {
        return Err(TensorError::ShapeMismatch {
            op: "classify_forward",
            lhs: shape,
            rhs: vec![n, cfg.token_dim()],
        });
    }
    let b = shape[0];
    let indices = vec![(0..n).collect::<Vec<_>>(); b];
    let x = encoder_forward(g, tokens, &indices, &params.encoder, cfg, fwd)?;
    let last = g.narrow(x, 1, n - 1, 1)?;
    let last = g.reshape(last, &[b, cfg.embed_dim])?;
    linear(g, last, head)
}

/// Full pre-training pass on a `[B, N, token_dim]` sequence (dummy
/// included). Returns `[B, N, token_dim]` predictions.
pub fn mae_forward<T: Scalar>(
    g: &mut Graph<T>,
    seq: &Tensor<T>,
    plan: &MaskPlan,
    params: &ModelParams<Var>,
    cfg: &ModelConfig,
    fwd: &mut Fwd,
) -> std::result::Result<Var, PatchError> {
    let dec = params.decoder.as_ref().ok_or(TensorError::InvalidArgument {
        op: "mae_forward",
        msg: "model has no decoder".into(),
    })?;
    let (visible, order) = gather_visible(seq, plan)?;
    let visible = g.leaf(visible);
    let encoded = encoder_forward(g, visible, &order, &params.encoder, cfg, fwd)?;
    let tokens = assemble_decoder_tokens(g, encoded, &order, dec.mask_token, dec.pos)?;
    Ok(decoder_forward(g, tokens, dec, cfg, fwd)?)
}
