use std::sync::mpsc;
use std::thread;

use crate::tensor::{Rng, StreamLabel, Tensor};

use super::augment::{horizontal_flip, random_resized_crop, resize_bilinear, AugmentPolicy, Image};
use super::cifar::ImageRecord;
use super::DataError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchMode {
    /// Seeded shuffle, then flip -> random resized crop -> normalize per image.
    TrainAugment,
    /// Dataset order, plain resize -> normalize. No randomness.
    Eval,
}

#[derive(Clone, Debug)]
pub struct Batch {
    /// `[B, 3, S, S]`, normalized.
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    /// Positions of the images in the source record list.
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Lazily assembled batches for one epoch. The final partial batch is kept.
pub struct EpochBatches<'a> {
    records: &'a [ImageRecord],
    order: Vec<usize>,
    batch_size: usize,
    mode: BatchMode,
    policy: AugmentPolicy,
    augment: Rng,
    pos: usize,
}

pub fn make_epoch_batches<'a>(
    records: &'a [ImageRecord],
    batch_size: usize,
    mode: BatchMode,
    policy: &AugmentPolicy,
    seed: u64,
    epoch: u64,
) -> Result<EpochBatches<'a>, DataError> {
    if records.is_empty() {
        return Err(DataError::Empty);
    }
    if batch_size == 0 {
        return Err(DataError::ZeroBatch);
    }
    policy.validate()?;
    let mut order: Vec<usize> = (0..records.len()).collect();
    if mode == BatchMode::TrainAugment {
        Rng::new(seed, StreamLabel::Shuffle).fork(epoch).shuffle(&mut order);
    }
    Ok(EpochBatches {
        records,
        order,
        batch_size,
        mode,
        policy: policy.clone(),
        augment: Rng::new(seed, StreamLabel::Augment).fork(epoch),
        pos: 0,
    })
}

impl EpochBatches<'_> {
    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }

    fn prepare(&self, index: usize) -> Image {
        let record = &self.records[index];
        let mut img = Image::from_bytes(record.pixels());
        let mut out = match self.mode {
            BatchMode::Eval => resize_bilinear(&img, self.policy.output_side),
            BatchMode::TrainAugment => {
                // Keyed by record, so augmentation is independent of batch order.
                let mut rng = self.augment.fork(index as u64);
                horizontal_flip(&mut img, self.policy.flip_prob, &mut rng);
                random_resized_crop(&img, &self.policy, &mut rng).0
            }
        };
        self.policy.norm.apply(&mut out);
        out
    }
}

impl Iterator for EpochBatches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let indices = self.order[self.pos..end].to_vec();
        self.pos = end;
        let side = self.policy.output_side;
        let mut data = Vec::with_capacity(indices.len() * 3 * side * side);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in &indices {
            data.extend(self.prepare(i).data);
            labels.push(self.records[i].label);
        }
        let images = Tensor::new(&[indices.len(), 3, side, side], data).expect("batch buffer");
        Some(Batch {
            images,
            labels,
            indices,
        })
    }
}

/// Drives `f` over all batches. With `prefetch`, batches are assembled on a
/// worker thread behind a bounded queue; the delivered sequence is the same.
pub fn for_each_batch<E>(
    batches: EpochBatches<'_>,
    prefetch: bool,
    mut f: impl FnMut(Batch) -> Result<(), E>,
) -> Result<(), E> {
    if !prefetch {
        for batch in batches {
            f(batch)?;
        }
        return Ok(());
    }
    thread::scope(|scope| {
        let (tx, rx) = mpsc::sync_channel::<Batch>(2);
        scope.spawn(move || {
            for batch in batches {
                if tx.send(batch).is_err() {
                    break;
                }
            }
        });
        for batch in rx {
            f(batch)?;
        }
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DatasetKind;

    fn records(n: usize) -> Vec<ImageRecord> {
        (0..n)
            .map(|i| {
                let px = (0..3072).map(|j| ((i * 37 + j * 11) % 256) as u8).collect();
                ImageRecord::new(px, i % 10, DatasetKind::Cifar10).unwrap()
            })
            .collect()
    }

    #[test]
    fn partial_final_batch_is_kept() {
        let recs = records(10);
        let sizes: Vec<usize> = make_epoch_batches(&recs, 4, BatchMode::TrainAugment, &AugmentPolicy::pretrain(), 1, 0)
            .unwrap()
            .map(|b| b.len())
            .collect();
        assert_eq!(sizes, vec![4, 4, 2]);
    }

    #[test]
    fn errors_on_empty_or_zero_batch() {
        let p = AugmentPolicy::pretrain();
        assert!(matches!(
            make_epoch_batches(&[], 4, BatchMode::Eval, &p, 0, 0),
            Err(DataError::Empty)
        ));
        assert!(matches!(
            make_epoch_batches(&records(2), 0, BatchMode::Eval, &p, 0, 0),
            Err(DataError::ZeroBatch)
        ));
    }

    #[test]
    fn seeded_epochs_are_bitwise_reproducible() {
        let recs = records(12);
        let p = AugmentPolicy::pretrain();
        let run = |seed, epoch| -> Vec<(Vec<usize>, Vec<u32>)> {
            make_epoch_batches(&recs, 5, BatchMode::TrainAugment, &p, seed, epoch)
                .unwrap()
                .map(|b| (b.indices, b.images.data().iter().map(|v| v.to_bits()).collect()))
                .collect()
        };
        assert_eq!(run(3, 1), run(3, 1));
        assert_ne!(run(3, 1), run(3, 2));
    }

    #[test]
    fn eval_is_seed_independent_and_ordered() {
        let recs = records(7);
        let p = AugmentPolicy::finetune();
        let a: Vec<_> = make_epoch_batches(&recs, 3, BatchMode::Eval, &p, 1, 0).unwrap().collect();
        let b: Vec<_> = make_epoch_batches(&recs, 3, BatchMode::Eval, &p, 999, 5).unwrap().collect();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.images, y.images);
            assert_eq!(x.labels, y.labels);
        }
        assert_eq!(a[0].indices, vec![0, 1, 2]);
    }

    #[test]
    fn training_pixels_in_range_and_labels_permuted() {
        let recs = records(40);
        let p = AugmentPolicy::pretrain();
        let mut labels = Vec::new();
        for b in make_epoch_batches(&recs, 16, BatchMode::TrainAugment, &p, 5, 3).unwrap() {
            assert_eq!(&b.images.shape()[1..], &[3, 36, 36]);
            assert!(b.images.data().iter().all(|v| (-1.0..=1.0).contains(v)));
            labels.extend(b.labels);
        }
        let mut expected: Vec<usize> = recs.iter().map(|r| r.label).collect();
        labels.sort_unstable();
        expected.sort_unstable();
        assert_eq!(labels, expected);
    }

    #[test]
    fn prefetch_delivers_identical_sequence() {
        let recs = records(23);
        let p = AugmentPolicy::pretrain();
        let collect = |prefetch| {
            let mut out = Vec::new();
            let it = make_epoch_batches(&recs, 4, BatchMode::TrainAugment, &p, 8, 2).unwrap();
            for_each_batch::<()>(it, prefetch, |b| {
                out.push(b.images);
                Ok(())
            })
            .unwrap();
            out
        };
        assert_eq!(collect(false), collect(true));
    }
}
