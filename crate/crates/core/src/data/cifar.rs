use std::fs;
use std::path::{Path, PathBuf};

use super::DataError;

pub const PIXELS_PER_IMAGE: usize = 32 * 32 * 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DatasetKind {
    Cifar10,
    Cifar100,
}

impl DatasetKind {
    pub fn classes(self) -> usize {
        match self {
            Self::Cifar10 => 10,
            Self::Cifar100 => 100,
        }
    }

    /// Label bytes followed by the three 1024-byte colour planes.
    pub fn record_len(self) -> usize {
        match self {
            Self::Cifar10 => 1 + PIXELS_PER_IMAGE,
            Self::Cifar100 => 2 + PIXELS_PER_IMAGE,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Cifar10 => "c10",
            Self::Cifar100 => "c100",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "c10" | "cifar10" => Some(Self::Cifar10),
            "c100" | "cifar100" => Some(Self::Cifar100),
            _ => None,
        }
    }

    fn subdir(self) -> &'static str {
        match self {
            Self::Cifar10 => "cifar-10-batches-bin",
            Self::Cifar100 => "cifar-100-binary",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Test => "test",
        }
    }
}

/// One 32x32 RGB image in channel-planar layout.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageRecord {
    pixels: Vec<u8>,
    pub label: usize,
    pub source: DatasetKind,
}

impl ImageRecord {
    pub fn new(pixels: Vec<u8>, label: usize, source: DatasetKind) -> Option<Self> {
        (pixels.len() == PIXELS_PER_IMAGE && label < source.classes()).then_some(Self {
            pixels,
            label,
            source,
        })
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }
}

/// Parses the raw bytes of one CIFAR binary file. C100 keeps the fine label.
pub fn parse_cifar(bytes: &[u8], kind: DatasetKind, path: &Path) -> Result<Vec<ImageRecord>, DataError> {
    let rec = kind.record_len();
    if bytes.is_empty() || !bytes.len().is_multiple_of(rec) {
        let actual = bytes.len() as u64;
        let expected = actual.div_ceil(rec as u64).max(1) * rec as u64;
        return Err(DataError::CorruptFile {
            path: path.to_path_buf(),
            expected,
            actual,
            record_len: rec,
        });
    }
    bytes
        .chunks_exact(rec)
        .enumerate()
        .map(|(i, chunk)| {
            let label_bytes = rec - PIXELS_PER_IMAGE;
            let label = chunk[label_bytes - 1] as usize;
            if label >= kind.classes() {
                return Err(DataError::LabelOutOfRange {
                    path: path.to_path_buf(),
                    record: i,
                    label,
                    classes: kind.classes(),
                });
            }
            Ok(ImageRecord {
                pixels: chunk[label_bytes..].to_vec(),
                label,
                source: kind,
            })
        })
        .collect()
}

fn split_files(dir: &Path, kind: DatasetKind, split: Split) -> Vec<PathBuf> {
    let root = if dir.join(kind.subdir()).is_dir() {
        dir.join(kind.subdir())
    } else {
        dir.to_path_buf()
    };
    match (kind, split) {
        (DatasetKind::Cifar10, Split::Train) => (1..=5)
            .map(|i| root.join(format!("data_batch_{i}.bin")))
            .filter(|p| p.is_file())
            .collect(),
        (DatasetKind::Cifar10, Split::Test) => vec![root.join("test_batch.bin")],
        (DatasetKind::Cifar100, Split::Train) => vec![root.join("train.bin")],
        (DatasetKind::Cifar100, Split::Test) => vec![root.join("test.bin")],
    }
    .into_iter()
    .filter(|p| p.is_file())
    .collect()
}

/// Loads every file of a split from `dir` (or its standard extracted
/// sub-directory), in file order.
pub fn load_cifar(dir: &Path, kind: DatasetKind, split: Split) -> Result<Vec<ImageRecord>, DataError> {
    let files = split_files(dir, kind, split);
    if files.is_empty() {
        return Err(DataError::MissingFiles {
            dir: dir.to_path_buf(),
            dataset: kind.name(),
            split: split.name(),
        });
    }
    let mut records = Vec::new();
    for path in files {
        let bytes = fs::read(&path)?;
        records.extend(parse_cifar(&bytes, kind, &path)?);
    }
    Ok(records)
}

/// Writes records in the binary layout `load_cifar` reads. For C100 the
/// coarse label byte is written as `fine / 5`.
pub fn write_cifar(path: &Path, records: &[ImageRecord]) -> Result<(), DataError> {
    let mut out = Vec::new();
    for r in records {
        if r.source == DatasetKind::Cifar100 {
            out.push((r.label / 5) as u8);
        }
        out.push(r.label as u8);
        out.extend_from_slice(&r.pixels);
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, out)?;
    Ok(())
}
