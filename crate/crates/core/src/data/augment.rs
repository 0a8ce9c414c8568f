use crate::tensor::Rng;

use super::DataError;

/// Three-channel image, channel-planar, values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), 3 * height * width, "image buffer size");
        Self { height, width, data }
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self::new(height, width, vec![value; 3 * height * width])
    }

    /// 32x32 CIFAR bytes scaled to `[0, 1]`.
    pub fn from_bytes(pixels: &[u8]) -> Self {
        Self::new(32, 32, pixels.iter().map(|&b| b as f32 / 255.0).collect())
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }
}

/// Per-channel `(x - mean) / std`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normalization {
    pub mean: f32,
    pub std: f32,
}

impl Default for Normalization {
    fn default() -> Self {
        Self { mean: 0.5, std: 0.5 }
    }
}

impl Normalization {
    pub fn unit(&self, x: f32) -> f32 {
        (x - self.mean) / self.std
    }

    pub fn byte(&self, b: u8) -> f32 {
        self.unit(b as f32 / 255.0)
    }

    /// Inverse of [`Self::unit`], clamped to `[0, 1]`.
    pub fn denormalize(&self, y: f32) -> f32 {
        (y * self.std + self.mean).clamp(0.0, 1.0)
    }

    pub fn apply(&self, img: &mut Image) {
        img.data.iter_mut().for_each(|v| *v = self.unit(*v));
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentPolicy {
    pub flip_prob: f64,
    /// Fraction of the source area covered by the crop.
    pub crop_scale: (f64, f64),
    /// Width / height of the crop.
    pub crop_ratio: (f64, f64),
    pub output_side: usize,
    pub norm: Normalization,
}

impl AugmentPolicy {
    pub fn pretrain() -> Self {
        Self {
            flip_prob: 0.5,
            crop_scale: (0.6, 1.0),
            crop_ratio: (3.0 / 4.0, 4.0 / 3.0),
            output_side: 36,
            norm: Normalization::default(),
        }
    }

    pub fn finetune() -> Self {
        Self {
            crop_scale: (0.8, 1.0),
            ..Self::pretrain()
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let (lo, hi) = self.crop_scale;
        let (rlo, rhi) = self.crop_ratio;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(DataError::InvalidPolicy(format!("crop scale [{lo}, {hi}] not within (0, 1]")));
        }
        if !(rlo > 0.0 && rlo <= rhi) {
            return Err(DataError::InvalidPolicy(format!("crop ratio [{rlo}, {rhi}]")));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(DataError::InvalidPolicy(format!("flip probability {}", self.flip_prob)));
        }
        if self.output_side < 1 || self.norm.std <= 0.0 {
            return Err(DataError::InvalidPolicy("output side and std must be positive".into()));
        }
        Ok(())
    }
}

/// Source-pixel sample positions for one output axis on the half-pixel grid:
/// `s = (d + 0.5) * in / out - 0.5`, clamped to `[0, in - 1]`.
fn sample_axis(input: usize, output: usize) -> Vec<(usize, usize, f32)> {
    let scale = input as f32 / output as f32;
    (0..output)
        .map(|d| {
            let s = ((d as f32 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f32);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, s - i0 as f32)
        })
        .collect()
}

/// Bilinear resize of the `h x w` window at `(top, left)` to `out_h x out_w`.
fn resize_window(img: &Image, window: CropWindow, out_h: usize, out_w: usize) -> Image {
    let ys = sample_axis(window.height, out_h);
    let xs = sample_axis(window.width, out_w);
    let mut data = Vec::with_capacity(3 * out_h * out_w);
    for c in 0..3 {
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let p = |y: usize, x: usize| img.at(c, window.top + y, window.left + x);
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bottom = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                data.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Image::new(out_h, out_w, data)
}

pub fn resize_bilinear(img: &Image, out_side: usize) -> Image {
    assert!(img.height >= 1 && img.width >= 1, "resize of an empty image");
    let full = CropWindow {
        top: 0,
        left: 0,
        height: img.height,
        width: img.width,
        fallback: false,
    };
    resize_window(img, full, out_side, out_side)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropWindow {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
    /// True when every random attempt failed and the centre crop was used.
    pub fallback: bool,
}

fn sample_window(h: usize, w: usize, policy: &AugmentPolicy, rng: &mut Rng) -> CropWindow {
    let area = (h * w) as f64;
    let (log_lo, log_hi) = (policy.crop_ratio.0.ln(), policy.crop_ratio.1.ln());
    for _ in 0..10 {
        let target = area * rng.uniform_range(policy.crop_scale.0, policy.crop_scale.1);
        let aspect = rng.uniform_range(log_lo, log_hi).exp();
        let cw = (target * aspect).sqrt().round() as usize;
        let ch = (target / aspect).sqrt().round() as usize;
        if cw == 0 || ch == 0 || cw > w || ch > h {
            continue;
        }
        // Rounding can push the realized area just outside the scale range.
        let realized = (cw * ch) as f64 / area;
        if realized < policy.crop_scale.0 || realized > policy.crop_scale.1 {
            continue;
        }
        return CropWindow {
            top: rng.below(h - ch + 1),
            left: rng.below(w - cw + 1),
            height: ch,
            width: cw,
            fallback: false,
        };
    }
    let in_ratio = w as f64 / h as f64;
    let (cw, ch) = if in_ratio < policy.crop_ratio.0 {
        (w, ((w as f64 / policy.crop_ratio.0).round() as usize).clamp(1, h))
    } else if in_ratio > policy.crop_ratio.1 {
        (((h as f64 * policy.crop_ratio.1).round() as usize).clamp(1, w), h)
    } else {
        (w, h)
    };
    CropWindow {
        top: (h - ch) / 2,
        left: (w - cw) / 2,
        height: ch,
        width: cw,
        fallback: true,
    }
}

/// Samples a crop window and resizes it to `policy.output_side`.
pub fn random_resized_crop(img: &Image, policy: &AugmentPolicy, rng: &mut Rng) -> (Image, CropWindow) {
    let window = sample_window(img.height, img.width, policy, rng);
    let out = resize_window(img, window, policy.output_side, policy.output_side);
    (out, window)
}

/// Mirrors columns with probability `p`; returns whether it flipped.
pub fn horizontal_flip(img: &mut Image, p: f64, rng: &mut Rng) -> bool {
    if !rng.bernoulli(p) {
        return false;
    }
    let w = img.width;
    for row in img.data.chunks_mut(w) {
        row.reverse();
    }
    true
}
