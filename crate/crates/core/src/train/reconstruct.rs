use std::fs;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::data::{make_epoch_batches, BatchMode, ImageRecord, Normalization};
use crate::model::{bind_frozen, mae_forward, Fwd, ModelParams};
use crate::patch::{append_dummy, patchify, sample_mask, unpatchify};
use crate::tensor::{Graph, Rng, StreamLabel, Tensor};

use super::{io_err, TrainError};

/// Integer upscale factor of every panel.
pub const DUMP_SCALE: usize = 4;
/// Fill value, in `[0, 1]`, of masked patches in the middle panel.
pub const MASK_GRAY: f32 = 0.5;

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Composites `[3, S, S]` panels in `[0, 1]` side by side, each upscaled by
/// `scale` with nearest-neighbour sampling. Returns `(width, height, rgb)`.
pub fn triptych(panels: &[&[f32]], side: usize, scale: usize) -> (usize, usize, Vec<u8>) {
    let (w, h) = (panels.len() * side * scale, side * scale);
    let plane = side * side;
    let mut rgb = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        for x in 0..w {
            let panel = panels[x / (side * scale)];
            let (sy, sx) = (y / scale, (x % (side * scale)) / scale);
            for c in 0..3 {
                rgb.push(to_byte(panel[c * plane + sy * side + sx]));
            }
        }
    }
    (w, h, rgb)
}

/// Binary portable pixmap.
pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<(), TrainError> {
    assert_eq!(rgb.len(), width * height * 3, "pixel buffer size");
    let mut bytes = format!("P6\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(rgb);
    fs::write(path, bytes).map_err(io_err(path))
}

fn denormalize(norm: &Normalization, data: &[f32]) -> Vec<f32> {
    data.iter().map(|&v| norm.denormalize(v)).collect()
}

/// Writes one original | masked | reconstruction triptych per image. Image
/// `i` uses a mask drawn from `(seed, i)`; the reconstruction panel shows the
/// decoder output for every patch, visible ones included.
pub fn reconstruct_dump(
    params: &ModelParams<Tensor<f32>>,
    cfg: &RunConfig,
    images: &[ImageRecord],
    seed: u64,
    out_dir: &Path,
) -> Result<Vec<PathBuf>, TrainError> {
    if params.decoder.is_none() {
        return Err(TrainError::Invalid("reconstruction needs a pre-training checkpoint with a decoder".into()));
    }
    if images.is_empty() {
        return Ok(Vec::new());
    }
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let policy = cfg.policy();
    let m = &cfg.model;
    let (n, p, side) = (m.n_patches(), m.patch_side, m.image_side);
    let batches = make_epoch_batches(images, 1, BatchMode::Eval, &policy, seed, 0)?;
    let mut written = Vec::new();
    for (i, batch) in batches.enumerate() {
        let tokens = patchify(&batch.images, p)?;
        let seq = append_dummy(&tokens, n)?;
        let plan = sample_mask(1, n, m.mask_ratio, &mut Rng::new(seed, StreamLabel::Mask).fork(i as u64))?;
        let mut g = Graph::<f32>::new();
        let vars = bind_frozen(&mut g, params);
        let pred = mae_forward(&mut g, &seq, &plan, &vars, m, &mut Fwd::eval())?;
        let pred = g.narrow(pred, 1, 0, n)?;
        let recon = unpatchify(&g.tensor(pred), p, n)?;

        let mut masked_tokens = tokens.clone();
        let gray = policy.norm.unit(MASK_GRAY);
        let d = m.token_dim();
        for &idx in &plan.masked[0] {
            masked_tokens.data_mut()[idx * d..(idx + 1) * d].fill(gray);
        }
        let masked = unpatchify(&masked_tokens, p, n)?;

        let original = denormalize(&policy.norm, batch.images.data());
        let masked = denormalize(&policy.norm, masked.data());
        let recon = denormalize(&policy.norm, recon.data());
        let (w, h, rgb) = triptych(&[&original, &masked, &recon], side, DUMP_SCALE);
        let path = out_dir.join(format!("triptych-{i:03}.ppm"));
        write_ppm(&path, w, h, &rgb)?;
        written.push(path);
    }
    Ok(written)
}
