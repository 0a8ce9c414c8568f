//! Procedural CIFAR-format datasets for smoke runs when the real archives
//! are not available. Each class has its own texture family and palette;
//! every image draws a random phase, position and colour jitter.

use std::f32::consts::TAU;
use std::path::Path;

use crate::tensor::{Rng, StreamLabel};

use super::cifar::{write_cifar, DatasetKind, ImageRecord, Split};
use super::DataError;

fn hue_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match h6 as u32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn render(class: usize, rng: &mut Rng) -> Vec<u8> {
    let pattern = class % 5;
    let freq = 1.0 + ((class / 5) % 4) as f32;
    let family = (class / 20) as f32;
    let fg = hue_to_rgb(class as f32 * 0.618 + 0.05 * rng.uniform() as f32, 0.75, 0.9);
    let bg = hue_to_rgb(0.5 + family * 0.13 + 0.05 * rng.uniform() as f32, 0.4, 0.35);
    let phase = rng.uniform() as f32 * TAU;
    let (cx, cy) = (8.0 + 16.0 * rng.uniform() as f32, 8.0 + 16.0 * rng.uniform() as f32);
    let radius = 6.0 + 5.0 * rng.uniform() as f32;
    let mut out = vec![0u8; 3 * 32 * 32];
    for y in 0..32 {
        for x in 0..32 {
            let (fx, fy) = (x as f32 / 32.0, y as f32 / 32.0);
            let wave = |u: f32| 0.5 + 0.5 * (TAU * freq * u + phase).sin();
            let t = match pattern {
                0 => wave(fy),
                1 => wave(fx),
                2 => wave(0.5 * (fx + fy)),
                3 => {
                    let d = ((x as f32 - cx).powi(2) + (y as f32 - cy).powi(2)).sqrt();
                    (1.0 - (d - radius).clamp(0.0, 3.0) / 3.0) * wave(d / 32.0).max(0.6)
                }
                _ => wave(fx) * wave(fy),
            };
            for c in 0..3 {
                let noise = (rng.uniform() as f32 - 0.5) * 0.06;
                let v = (bg[c] * (1.0 - t) + fg[c] * t + noise).clamp(0.0, 1.0);
                out[(c * 32 + y) * 32 + x] = (v * 255.0).round() as u8;
            }
        }
    }
    out
}

/// `n` images with labels cycling through every class.
pub fn generate(kind: DatasetKind, n: usize, seed: u64) -> Vec<ImageRecord> {
    let base = Rng::new(seed, StreamLabel::Init).fork(0x5E7_DA7A);
    (0..n)
        .map(|i| {
            let label = i % kind.classes();
            let mut rng = base.fork(i as u64);
            ImageRecord::new(render(label, &mut rng), label, kind).expect("synthetic record")
        })
        .collect()
}

/// Writes train and test files under `dir` using the standard CIFAR file names.
pub fn write_fixture(dir: &Path, kind: DatasetKind, n_train: usize, n_test: usize, seed: u64) -> Result<(), DataError> {
    let train = generate(kind, n_train, seed);
    let test = generate(kind, n_test, seed ^ 0xA5A5_A5A5);
    let name = |split| match (kind, split) {
        (DatasetKind::Cifar10, Split::Train) => "data_batch_1.bin",
        (DatasetKind::Cifar10, Split::Test) => "test_batch.bin",
        (DatasetKind::Cifar100, Split::Train) => "train.bin",
        (DatasetKind::Cifar100, Split::Test) => "test.bin",
    };
    write_cifar(&dir.join(name(Split::Train)), &train)?;
    write_cifar(&dir.join(name(Split::Test)), &test)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::load_cifar;

    #[test]
    fn fixture_round_trips_through_loader() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path(), DatasetKind::Cifar100, 250, 20, 3).unwrap();
        let train = load_cifar(dir.path(), DatasetKind::Cifar100, Split::Train).unwrap();
        assert_eq!(train, generate(DatasetKind::Cifar100, 250, 3));
        assert_eq!(train[99].label, 99);
        assert_eq!(load_cifar(dir.path(), DatasetKind::Cifar100, Split::Test).unwrap().len(), 20);
    }

    #[test]
    fn images_are_not_flat() {
        for r in generate(DatasetKind::Cifar10, 10, 1) {
            let px = r.pixels();
            let (min, max) = (px.iter().min().unwrap(), px.iter().max().unwrap());
            assert!(max - min > 40, "class {} too flat", r.label);
        }
    }
}
