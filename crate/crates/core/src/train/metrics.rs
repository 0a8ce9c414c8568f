use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::{io_err, TrainError};

pub const METRICS_HEADER: &str = "epoch,split,loss,accuracy,lr,seconds";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Val => "val",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    /// 1-based epoch.
    pub epoch: u64,
    pub split: Split,
    pub loss: f64,
    pub accuracy: Option<f64>,
    pub lr: f64,
    /// Wall time of the epoch; omitted in deterministic mode.
    pub seconds: Option<f64>,
}

impl fmt::Display for MetricsRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        write!(
            f,
            "{},{},{},{},{},{}",
            self.epoch,
            self.split.name(),
            self.loss,
            opt(self.accuracy),
            self.lr,
            self.seconds.map(|s| format!("{s:.3}")).unwrap_or_default()
        )
    }
}

impl MetricsRow {
    pub fn parse(line: &str) -> Option<Self> {
        let f: Vec<&str> = line.trim_end().split(',').collect();
        if f.len() != 6 {
            return None;
        }
        let opt = |s: &str| if s.is_empty() { Some(None) } else { s.parse().ok().map(Some) };
        Some(Self {
            epoch: f[0].parse().ok()?,
            split: match f[1] {
                "train" => Split::Train,
                "val" => Split::Val,
                _ => return None,
            },
            loss: f[2].parse().ok()?,
            accuracy: opt(f[3])?,
            lr: f[4].parse().ok()?,
            seconds: opt(f[5])?,
        })
    }
}

/// Append-only metrics CSV, flushed after every row.
pub struct MetricsLog {
    path: PathBuf,
    file: fs::File,
}

impl MetricsLog {
    /// Starts a fresh log, or reopens one keeping only rows up to
    /// `keep_through` epochs when resuming.
    pub fn open(path: &Path, keep_through: Option<u64>) -> Result<Self, TrainError> {
        let mut kept = Vec::new();
        if let Some(limit) = keep_through {
            if let Ok(text) = fs::read_to_string(path) {
                kept = text
                    .lines()
                    .skip(1)
                    .filter(|l| MetricsRow::parse(l).is_some_and(|r| r.epoch <= limit))
                    .map(str::to_owned)
                    .collect();
            }
        }
        let mut file = fs::File::create(path).map_err(io_err(path))?;
        let mut text = format!("{METRICS_HEADER}\n");
        for l in kept {
            text.push_str(&l);
            text.push('\n');
        }
        file.write_all(text.as_bytes()).map_err(io_err(path))?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
        })
    }

    pub fn append(&mut self, row: &MetricsRow) -> Result<(), TrainError> {
        writeln!(self.file, "{row}").map_err(io_err(&self.path))?;
        self.file.flush().map_err(io_err(&self.path))
    }

    pub fn read(path: &Path) -> Result<Vec<MetricsRow>, TrainError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut lines = text.lines();
        if lines.next() != Some(METRICS_HEADER) {
            return Err(TrainError::Invalid(format!("{}: missing metrics header", path.display())));
        }
        lines
            .enumerate()
            .map(|(i, l)| {
                MetricsRow::parse(l)
                    .ok_or_else(|| TrainError::Invalid(format!("{}: bad row {}: {l}", path.display(), i + 2)))
            })
            .collect()
    }
}
