//! `OTTC` checkpoints.
//!
//! Layout (little-endian): `"OTTC"`, `u32` version, the canonical config
//! JSON and the vocabulary string (each `u32` length + bytes), parameter
//! tensors in declared order, Adam state, RNG seed (`u64`) and stream
//! position (`u128`), iteration (`u64`), metrics rows, and finally an
//! FNV-1a 64 checksum of every preceding byte. A tensor is `u32` rows,
//! `u32` cols, then `f64` entries in row-major order.

use std::hash::Hasher;
use std::path::Path;

use fnv::FnvHasher;
use ott_core::data::Vocab;
use ott_core::optim::AdamState;
use ott_core::train::{MetricsRow, TrainState};
use ott_core::transformer::ModelParams;
use ott_core::{RngState, Tensor};
use thiserror::Error;

use crate::bytes::{Reader, Truncated, Writer};
use crate::config::RunConfig;

pub const MAGIC: &[u8; 4] = b"OTTC";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("checkpoint checksum mismatch: stored {stored:016x}, computed {computed:016x}")]
    Checksum { stored: u64, computed: u64 },
    #[error("not an OTTC checkpoint")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

impl CheckpointError {
    /// True for damage to the file itself, as opposed to IO failures.
    pub fn is_corruption(&self) -> bool {
        !matches!(self, CheckpointError::Io(_))
    }
}

impl From<Truncated> for CheckpointError {
    fn from(_: Truncated) -> Self {
        CheckpointError::Truncated
    }
}

fn malformed(m: impl Into<String>) -> CheckpointError {
    CheckpointError::Malformed(m.into())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub vocab: Vocab,
    pub state: TrainState,
}

fn fnv64(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

fn put_tensor(w: &mut Writer, t: &Tensor) {
    w.u32(t.rows() as u32);
    w.u32(t.cols() as u32);
    for &x in t.data() {
        w.f64(x);
    }
}

fn get_tensor(r: &mut Reader) -> Result<Tensor, CheckpointError> {
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    let n = rows.checked_mul(cols).ok_or_else(|| malformed("tensor too large"))?;
    if r.remaining() / 8 < n {
        return Err(CheckpointError::Truncated);
    }
    let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
    Tensor::from_vec(rows, cols, data).map_err(|e| malformed(e.to_string()))
}

/// Reads `count` tensors into `slots`, which fix the expected shapes.
fn get_into(r: &mut Reader, slots: Vec<&mut Tensor>, what: &str) -> Result<(), CheckpointError> {
    let count = r.u32()? as usize;
    if count != slots.len() {
        return Err(malformed(format!("{what}: {count} tensors, expected {}", slots.len())));
    }
    for (i, slot) in slots.into_iter().enumerate() {
        let t = get_tensor(r)?;
        if t.shape() != slot.shape() {
            return Err(malformed(format!("{what} tensor {i} has the wrong shape")));
        }
        *slot = t;
    }
    Ok(())
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.blob(self.config.canonical_json().as_bytes());
        w.blob(self.vocab.as_string().as_bytes());

        let params = self.state.params.tensors();
        w.u32(params.len() as u32);
        params.iter().for_each(|t| put_tensor(&mut w, t));

        let o = &self.state.optim;
        w.u64(o.step);
        w.f64(o.beta1);
        w.f64(o.beta2);
        w.f64(o.eps);
        for moments in [&o.m, &o.v] {
            w.u32(moments.len() as u32);
            moments.iter().for_each(|t| put_tensor(&mut w, t));
        }

        w.u64(self.state.rng.seed());
        w.u128(self.state.rng.word_pos());
        w.u64(self.state.iteration);

        w.u32(self.state.history.len() as u32);
        for row in &self.state.history {
            w.u64(row.iteration);
            w.f64(row.train_loss);
            w.f64(row.test_loss);
            w.f64(row.transport_cost);
            w.f64(row.perplexity);
            w.u64(row.wall_ms);
        }

        let sum = fnv64(&w.buf);
        w.u64(sum);
        w.buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let n = r.u32()? as usize;
        let json = std::str::from_utf8(r.take(n)?).map_err(|_| malformed("config is not UTF-8"))?;
        let config = RunConfig::from_json(json).map_err(|e| malformed(e.to_string()))?;
        let n = r.u32()? as usize;
        let chars = std::str::from_utf8(r.take(n)?).map_err(|_| malformed("vocabulary is not UTF-8"))?;
        let vocab = Vocab::from_chars(chars.chars().collect()).map_err(|e| malformed(e.to_string()))?;
        if vocab.as_string() != chars {
            return Err(malformed("vocabulary is not sorted and unique"));
        }

        let model = config.model_config(vocab.len());
        let mut params = ModelParams::init(&model, &mut RngState::new(0));
        get_into(&mut r, params.tensors_mut(), "parameters")?;

        let step = r.u64()?;
        let (beta1, beta2, eps) = (r.f64()?, r.f64()?, r.f64()?);
        let mut optim = AdamState::new(&params.tensors(), beta1, beta2, eps);
        optim.step = step;
        get_into(&mut r, optim.m.iter_mut().collect(), "first moments")?;
        get_into(&mut r, optim.v.iter_mut().collect(), "second moments")?;

        let rng = RngState::restore(r.u64()?, r.u128()?);
        let iteration = r.u64()?;

        let rows = r.u32()? as usize;
        if r.remaining() / 48 < rows {
            return Err(CheckpointError::Truncated);
        }
        let mut history = Vec::with_capacity(rows);
        for _ in 0..rows {
            history.push(MetricsRow {
                iteration: r.u64()?,
                train_loss: r.f64()?,
                test_loss: r.f64()?,
                transport_cost: r.f64()?,
                perplexity: r.f64()?,
                wall_ms: r.u64()?,
            });
        }

        let body = r.position();
        let stored = r.u64()?;
        if r.remaining() != 0 {
            return Err(malformed("trailing bytes after checksum"));
        }
        let computed = fnv64(&bytes[..body]);
        if stored != computed {
            return Err(CheckpointError::Checksum { stored, computed });
        }
        Ok(Self {
            config,
            vocab,
            state: TrainState {
                params,
                optim,
                rng,
                iteration,
                history,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::decode(&std::fs::read(path)?)
    }
}
