//! Binary checkpoint format, little-endian throughout:
//!
//! ```text
//! "MAEC" | version u32 | stage u8 | epoch u64 | global_step u64
//! config: len u32, utf-8 bytes
//! rng states: count u32, then (seed u64, label u8, key u64, counter u128)
//! tensors: count u32, then (name len u32, name, rank u32, dims u64..., f32 data)
//! optimizer: flag u8; if 1: t u64, count u32, then (name, len u64, m f32..., v f32...)
//! ```

use std::io::{self, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::model::{ModelParams, Stage};
use crate::optim::OptState;
use crate::tensor::{RngState, StreamLabel, Tensor};

pub const MAGIC: &[u8; 4] = b"MAEC";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint: bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint does not match the model:\n  {}", .0.join("\n  "))]
    Incompatible(Vec<String>),
    #[error("checkpoint config: {0}")]
    Config(#[from] ConfigError),
    #[error("checkpoint I/O on {path}: {source}")]
    Io { path: String, source: io::Error },
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptSnapshot {
    pub t: u64,
    /// `(name, m, v)` per parameter.
    pub moments: Vec<(String, Vec<f32>, Vec<f32>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub config_text: String,
    /// Completed epochs.
    pub epoch: u64,
    /// Completed optimizer steps.
    pub global_step: u64,
    pub rng_states: Vec<RngState>,
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub opt: Option<OptSnapshot>,
}

fn read_err(e: io::Error) -> CheckpointError {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        CheckpointError::Truncated
    } else {
        CheckpointError::Corrupt(e.to_string())
    }
}

fn write_str(w: &mut Vec<u8>, s: &str) {
    w.write_u32::<LE>(s.len() as u32).unwrap();
    w.extend_from_slice(s.as_bytes());
}

fn read_str(r: &mut &[u8]) -> Result<String, CheckpointError> {
    let n = r.read_u32::<LE>().map_err(read_err)? as usize;
    if n > r.len() {
        return Err(CheckpointError::Truncated);
    }
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf).map_err(read_err)?;
    String::from_utf8(buf).map_err(|e| CheckpointError::Corrupt(e.to_string()))
}

fn write_f32s(w: &mut Vec<u8>, data: &[f32]) {
    w.reserve(data.len() * 4);
    for &x in data {
        w.write_f32::<LE>(x).unwrap();
    }
}

fn read_f32s(r: &mut &[u8], n: usize) -> Result<Vec<f32>, CheckpointError> {
    if n.checked_mul(4).is_none_or(|b| b > r.len()) {
        return Err(CheckpointError::Truncated);
    }
    let mut out = vec![0f32; n];
    r.read_f32_into::<LE>(&mut out).map_err(read_err)?;
    Ok(out)
}

impl Checkpoint {
    pub fn new(
        config: &RunConfig,
        params: &ModelParams<Tensor<f32>>,
        opt: Option<&OptState<f32>>,
        epoch: u64,
        global_step: u64,
        rng_states: Vec<RngState>,
    ) -> Self {
        let entries = params.entries();
        let tensors = entries.iter().map(|(i, t)| (i.name.clone(), (*t).clone())).collect();
        let opt = opt.map(|s| OptSnapshot {
            t: s.t,
            moments: entries
                .iter()
                .zip(s.m.iter().zip(&s.v))
                .map(|((i, _), (m, v))| (i.name.clone(), m.clone(), v.clone()))
                .collect(),
        });
        Self {
            stage: config.stage,
            config_text: config.to_text(),
            epoch,
            global_step,
            rng_states,
            tensors,
            opt,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        w.write_u32::<LE>(VERSION).unwrap();
        w.write_u8(match self.stage {
            Stage::Pretrain => 0,
            Stage::Finetune => 1,
        })
        .unwrap();
        w.write_u64::<LE>(self.epoch).unwrap();
        w.write_u64::<LE>(self.global_step).unwrap();
        write_str(&mut w, &self.config_text);
        w.write_u32::<LE>(self.rng_states.len() as u32).unwrap();
        for s in &self.rng_states {
            w.write_u64::<LE>(s.seed).unwrap();
            w.write_u8(s.label as u8).unwrap();
            w.write_u64::<LE>(s.key).unwrap();
            w.write_u128::<LE>(s.counter).unwrap();
        }
        w.write_u32::<LE>(self.tensors.len() as u32).unwrap();
        for (name, t) in &self.tensors {
            write_str(&mut w, name);
            w.write_u32::<LE>(t.shape().len() as u32).unwrap();
            for &d in t.shape() {
                w.write_u64::<LE>(d as u64).unwrap();
            }
            write_f32s(&mut w, t.data());
        }
        match &self.opt {
            None => w.write_u8(0).unwrap(),
            Some(o) => {
                w.write_u8(1).unwrap();
                w.write_u64::<LE>(o.t).unwrap();
                w.write_u32::<LE>(o.moments.len() as u32).unwrap();
                for (name, m, v) in &o.moments {
                    write_str(&mut w, name);
                    w.write_u64::<LE>(m.len() as u64).unwrap();
                    write_f32s(&mut w, m);
                    write_f32s(&mut w, v);
                }
            }
        }
        w
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(read_err)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic(magic));
        }
        let version = r.read_u32::<LE>().map_err(read_err)?;
        if version != VERSION {
            return Err(CheckpointError::Version {
                found: version,
                expected: VERSION,
            });
        }
        let stage = match r.read_u8().map_err(read_err)? {
            0 => Stage::Pretrain,
            1 => Stage::Finetune,
            s => return Err(CheckpointError::Corrupt(format!("unknown stage tag {s}"))),
        };
        let epoch = r.read_u64::<LE>().map_err(read_err)?;
        let global_step = r.read_u64::<LE>().map_err(read_err)?;
        let config_text = read_str(&mut r)?;
        let n_rng = r.read_u32::<LE>().map_err(read_err)?;
        let mut rng_states = Vec::new();
        for _ in 0..n_rng {
            let seed = r.read_u64::<LE>().map_err(read_err)?;
            let tag = r.read_u8().map_err(read_err)?;
            let label =
                StreamLabel::from_u8(tag).ok_or_else(|| CheckpointError::Corrupt(format!("unknown stream {tag}")))?;
            let key = r.read_u64::<LE>().map_err(read_err)?;
            let counter = r.read_u128::<LE>().map_err(read_err)?;
            rng_states.push(RngState {
                seed,
                label,
                key,
                counter,
            });
        }
        let n_tensors = r.read_u32::<LE>().map_err(read_err)?;
        let mut tensors = Vec::new();
        for _ in 0..n_tensors {
            let name = read_str(&mut r)?;
            let rank = r.read_u32::<LE>().map_err(read_err)?;
            let mut shape = Vec::new();
            for _ in 0..rank {
                shape.push(r.read_u64::<LE>().map_err(read_err)? as usize);
            }
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let n = n.ok_or_else(|| CheckpointError::Corrupt(format!("{name}: shape overflow")))?;
            let data = read_f32s(&mut r, n)?;
            let t = Tensor::new(&shape, data).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
            tensors.push((name, t));
        }
        let opt = match r.read_u8().map_err(read_err)? {
            0 => None,
            1 => {
                let t = r.read_u64::<LE>().map_err(read_err)?;
                let count = r.read_u32::<LE>().map_err(read_err)?;
                let mut moments = Vec::new();
                for _ in 0..count {
                    let name = read_str(&mut r)?;
                    let n = r.read_u64::<LE>().map_err(read_err)? as usize;
                    let m = read_f32s(&mut r, n)?;
                    let v = read_f32s(&mut r, n)?;
                    moments.push((name, m, v));
                }
                Some(OptSnapshot { t, moments })
            }
            f => return Err(CheckpointError::Corrupt(format!("bad optimizer flag {f}"))),
        };
        if !r.is_empty() {
            return Err(CheckpointError::Corrupt(format!("{} trailing bytes", r.len())));
        }
        Ok(Self {
            stage,
            config_text,
            epoch,
            global_step,
            rng_states,
            tensors,
            opt,
        })
    }

    /// Writes atomically through a temporary sibling file.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let io_err = |source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        };
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp).map_err(io_err)?;
        f.write_all(&self.to_bytes()).map_err(io_err)?;
        f.sync_all().map_err(io_err)?;
        std::fs::rename(&tmp, path).map_err(io_err)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }

    pub fn config(&self) -> Result<RunConfig, CheckpointError> {
        Ok(RunConfig::from_text(self.stage, &self.config_text)?)
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Copies stored tensors into `params` by name. Parameters accepted by
    /// `filter` must all be present with matching shapes; any difference is
    /// listed in the error.
    pub fn load_into(
        &self,
        params: &mut ModelParams<Tensor<f32>>,
        filter: impl Fn(&str) -> bool,
    ) -> Result<usize, CheckpointError> {
        let mut diffs = Vec::new();
        let mut loaded = 0;
        for (info, p) in params.entries_mut() {
            if !filter(&info.name) {
                continue;
            }
            match self.tensor(&info.name) {
                None => diffs.push(format!("{}: missing from checkpoint (model {:?})", info.name, p.shape())),
                Some(t) if t.shape() != p.shape() => {
                    diffs.push(format!("{}: checkpoint {:?} vs model {:?}", info.name, t.shape(), p.shape()))
                }
                Some(t) => {
                    p.data_mut().copy_from_slice(t.data());
                    loaded += 1;
                }
            }
        }
        if diffs.is_empty() {
            Ok(loaded)
        } else {
            Err(CheckpointError::Incompatible(diffs))
        }
    }

    /// Optimizer moments aligned with `params`, if stored and compatible.
    pub fn opt_state(&self, params: &ModelParams<Tensor<f32>>) -> Result<Option<OptState<f32>>, CheckpointError> {
        let Some(o) = &self.opt else {
            return Ok(None);
        };
        let entries = params.entries();
        let mut diffs = Vec::new();
        let (mut m, mut v) = (Vec::new(), Vec::new());
        for (info, p) in &entries {
            match o.moments.iter().find(|(n, _, _)| *n == info.name) {
                Some((_, mm, vv)) if mm.len() == p.numel() => {
                    m.push(mm.clone());
                    v.push(vv.clone());
                }
                Some((_, mm, _)) => diffs.push(format!("{}: moments {} vs {}", info.name, mm.len(), p.numel())),
                None => diffs.push(format!("{}: no optimizer moments", info.name)),
            }
        }
        if !diffs.is_empty() {
            return Err(CheckpointError::Incompatible(diffs));
        }
        Ok(Some(OptState { m, v, t: o.t }))
    }
}
