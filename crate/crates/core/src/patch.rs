//! Patch tiling, the zero dummy patch, random masking, and decoder token assembly.
//!
//! Token layout: index `p < n` is the patch at row `p / grid`, column
//! `p % grid`; index `n` is the dummy patch. Each token is flattened
//! channel-major, then row-major within the patch.

use thiserror::Error;

use crate::tensor::{Graph, Rng, Scalar, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PatchError {
    #[error("image side {image_side} is not divisible by patch side {patch_side}")]
    NotDivisible { image_side: usize, patch_side: usize },
    #[error("expected {expected} tokens, got {actual}")]
    WrongTokenCount { expected: usize, actual: usize },
    #[error("mask ratio {0} outside [0, 1)")]
    InvalidRatio(f64),
    #[error("mask plan does not match the sequence: {0}")]
    InconsistentPlan(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

type Result<T> = std::result::Result<T, PatchError>;

fn expect_rank(t: &[usize], rank: usize, op: &'static str) -> Result<()> {
    if t.len() != rank {
        return Err(TensorError::InvalidArgument {
            op,
            msg: format!("expected rank {rank}, got shape {t:?}"),
        }
        .into());
    }
    Ok(())
}

/// `[B, 3, S, S] -> [B, (S/p)^2, 3 p^2]`.
pub fn patchify<T: Scalar>(images: &Tensor<T>, patch_side: usize) -> Result<Tensor<T>> {
    let shape = images.shape();
    expect_rank(shape, 4, "patchify")?;
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if patch_side == 0 || h != w || h % patch_side != 0 {
        return Err(PatchError::NotDivisible {
            image_side: h,
            patch_side,
        });
    }
    let grid = h / patch_side;
    let dim = c * patch_side * patch_side;
    let src = images.data();
    let mut out = Vec::with_capacity(src.len());
    for bi in 0..b {
        for gy in 0..grid {
            for gx in 0..grid {
                for ch in 0..c {
                    for py in 0..patch_side {
                        let row = ((bi * c + ch) * h + gy * patch_side + py) * w + gx * patch_side;
                        out.extend_from_slice(&src[row..row + patch_side]);
                    }
                }
            }
        }
    }
    Ok(Tensor::new(&[b, grid * grid, dim], out)?)
}

/// Inverse of [`patchify`] for 3-channel images.
pub fn unpatchify<T: Scalar>(tokens: &Tensor<T>, patch_side: usize, n_patches: usize) -> Result<Tensor<T>> {
    let shape = tokens.shape();
    expect_rank(shape, 3, "unpatchify")?;
    if shape[1] != n_patches {
        return Err(PatchError::WrongTokenCount {
            expected: n_patches,
            actual: shape[1],
        });
    }
    let grid = (n_patches as f64).sqrt().round() as usize;
    let c = 3;
    if grid * grid != n_patches || shape[2] != c * patch_side * patch_side {
        return Err(PatchError::InconsistentPlan(format!(
            "{n_patches} tokens of width {} do not tile a square {c}-channel image with {patch_side}x{patch_side} patches",
            shape[2]
        )));
    }
    let b = shape[0];
    let side = grid * patch_side;
    let src = tokens.data();
    let mut out = vec![T::zero(); b * c * side * side];
    let mut it = src.iter();
    for bi in 0..b {
        for gy in 0..grid {
            for gx in 0..grid {
                for ch in 0..c {
                    for py in 0..patch_side {
                        let row = ((bi * c + ch) * side + gy * patch_side + py) * side + gx * patch_side;
                        for px in 0..patch_side {
                            out[row + px] = *it.next().expect("token length checked");
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::new(&[b, c, side, side], out)?)
}

/// Appends the all-zero dummy token: `[B, n, D] -> [B, n + 1, D]`.
pub fn append_dummy<T: Scalar>(seq: &Tensor<T>, n_patches: usize) -> Result<Tensor<T>> {
    let shape = seq.shape();
    expect_rank(shape, 3, "append_dummy")?;
    if shape[1] != n_patches {
        return Err(PatchError::WrongTokenCount {
            expected: n_patches,
            actual: shape[1],
        });
    }
    let (b, d) = (shape[0], shape[2]);
    let mut out = Vec::with_capacity(b * (n_patches + 1) * d);
    for sample in seq.data().chunks(n_patches * d) {
        out.extend_from_slice(sample);
        out.extend(std::iter::repeat_n(T::zero(), d));
    }
    Ok(Tensor::new(&[b, n_patches + 1, d], out)?)
}

/// `round(ratio * n)`.
pub fn masked_count(n_patches: usize, ratio: f64) -> usize {
    (ratio * n_patches as f64).round() as usize
}

/// Per-sample split of the image patches into visible and masked sets. The
/// dummy patch (index `n_patches`) is never part of either set and is always
/// fed to the encoder.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPlan {
    pub n_patches: usize,
    /// Visible patch indices in permutation order.
    pub visible: Vec<Vec<usize>>,
    pub masked: Vec<Vec<usize>>,
}

impl MaskPlan {
    /// All patches visible, identity order (fine-tuning and `ratio = 0` checks).
    pub fn unmasked(batch: usize, n_patches: usize) -> Self {
        Self {
            n_patches,
            visible: vec![(0..n_patches).collect(); batch],
            masked: vec![Vec::new(); batch],
        }
    }

    pub fn batch_size(&self) -> usize {
        self.visible.len()
    }

    /// Encoder input order: visible patches, then the dummy.
    pub fn encoder_order(&self) -> Vec<Vec<usize>> {
        self.visible
            .iter()
            .map(|v| v.iter().copied().chain(std::iter::once(self.n_patches)).collect())
            .collect()
    }

    pub fn masked_flags(&self, sample: usize) -> Vec<bool> {
        let mut flags = vec![false; self.n_patches];
        for &m in &self.masked[sample] {
            flags[m] = true;
        }
        flags
    }

    /// Checks that each sample partitions `0..n_patches` with equal visible counts.
    pub fn validate(&self) -> Result<()> {
        if self.visible.len() != self.masked.len() {
            return Err(PatchError::InconsistentPlan("visible/masked batch sizes differ".into()));
        }
        let v0 = self.visible.first().map_or(0, Vec::len);
        for (b, (vis, mas)) in self.visible.iter().zip(&self.masked).enumerate() {
            if vis.len() != v0 {
                return Err(PatchError::InconsistentPlan(format!("sample {b} has {} visible, expected {v0}", vis.len())));
            }
            let mut seen = vec![false; self.n_patches];
            for &i in vis.iter().chain(mas) {
                if i >= self.n_patches || std::mem::replace(&mut seen[i], true) {
                    return Err(PatchError::InconsistentPlan(format!("sample {b}: bad or repeated index {i}")));
                }
            }
            if seen.iter().any(|s| !s) {
                return Err(PatchError::InconsistentPlan(format!("sample {b} does not cover every patch")));
            }
        }
        Ok(())
    }
}

/// Independent uniform permutation per sample; the first `n - round(ratio n)`
/// entries are visible.
pub fn sample_mask(batch: usize, n_patches: usize, ratio: f64, rng: &mut Rng) -> Result<MaskPlan> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(PatchError::InvalidRatio(ratio));
    }
    let n_visible = n_patches - masked_count(n_patches, ratio);
    let mut visible = Vec::with_capacity(batch);
    let mut masked = Vec::with_capacity(batch);
    for _ in 0..batch {
        let mut perm: Vec<usize> = (0..n_patches).collect();
        rng.shuffle(&mut perm);
        masked.push(perm.split_off(n_visible));
        visible.push(perm);
    }
    Ok(MaskPlan {
        n_patches,
        visible,
        masked,
    })
}

/// Selects the encoder input rows from a `[B, n + 1, D]` sequence. Returns
/// the `[B, V + 1, D]` tokens and, per sample, the original index of each row.
pub fn gather_visible<T: Scalar>(seq: &Tensor<T>, plan: &MaskPlan) -> Result<(Tensor<T>, Vec<Vec<usize>>)> {
    let shape = seq.shape();
    expect_rank(shape, 3, "gather_visible")?;
    plan.validate()?;
    if shape[0] != plan.batch_size() || shape[1] != plan.n_patches + 1 {
        return Err(PatchError::InconsistentPlan(format!(
            "sequence {shape:?} vs plan for {} samples of {} patches",
            plan.batch_size(),
            plan.n_patches
        )));
    }
    let (n, d) = (shape[1], shape[2]);
    let order = plan.encoder_order();
    let v = order.first().map_or(0, Vec::len);
    let src = seq.data();
    let mut out = Vec::with_capacity(shape[0] * v * d);
    for (b, idx) in order.iter().enumerate() {
        for &i in idx {
            let at = (b * n + i) * d;
            out.extend_from_slice(&src[at..at + d]);
        }
    }
    Ok((Tensor::new(&[shape[0], v, d], out)?, order))
}

/// Builds the decoder input: encoder outputs at their original positions,
/// the shared mask token everywhere else, plus the decoder positional table.
pub fn assemble_decoder_tokens<T: Scalar>(
    g: &mut Graph<T>,
    encoded: Var,
    order: &[Vec<usize>],
    mask_token: Var,
    dec_pos: Var,
) -> Result<Var> {
    let es = g.shape(encoded).to_vec();
    let ps = g.shape(dec_pos).to_vec();
    expect_rank(&es, 3, "assemble_decoder_tokens")?;
    let (b, v, d) = (es[0], es[1], es[2]);
    if ps.len() != 2 || ps[1] != d || g.shape(mask_token) != [d] || order.len() != b {
        return Err(TensorError::ShapeMismatch {
            op: "assemble_decoder_tokens",
            lhs: es,
            rhs: ps,
        }
        .into());
    }
    let n = ps[0];
    let mut idx = Vec::with_capacity(b * v);
    for (bi, o) in order.iter().enumerate() {
        if o.len() != v {
            return Err(PatchError::InconsistentPlan(format!("sample {bi} has {} rows, expected {v}", o.len())));
        }
        idx.extend(o.iter().map(|&p| bi * n + p));
    }
    let zeros = g.constant(&[b * n, d], vec![T::zero(); b * n * d])?;
    let base = g.add(zeros, mask_token)?;
    let rows = g.reshape(encoded, &[b * v, d])?;
    let merged = g.scatter_rows(base, &idx, rows)?;
    let merged = g.reshape(merged, &[b, n, d])?;
    Ok(g.add(merged, dec_pos)?)
}
