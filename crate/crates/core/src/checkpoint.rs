//! Versioned binary checkpoint for [`VelocityModel`] weights.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! "FCV1"                      magic
//! u32                         format version
//! u32 u32 u32 u32             input_dim, hidden_dim, depth, n_freq
//! f64 * n_freq                time-embedding frequencies
//! u64, f64 * n                flat weight vector
//! u64, bytes                  JSON training metadata
//! u64                         FNV-1a hash of everything above
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::Result;
use crate::model::{Architecture, VelocityModel};

pub const MAGIC: &[u8; 4] = b"FCV1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("unsupported format version {found} (expected {FORMAT_VERSION})")]
    Version { found: u32 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("architecture mismatch: expected {expected:?}, found {found:?}")]
    ArchitectureMismatch {
        expected: Box<Architecture>,
        found: Box<Architecture>,
    },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub dataset: String,
    pub steps: usize,
    pub epochs: usize,
    pub final_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub architecture: Architecture,
    pub weights: Vec<f64>,
    pub metadata: TrainingMetadata,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| CheckpointError::Corrupt(format!("truncated while reading {what}")))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>, CheckpointError> {
        let bytes = n
            .checked_mul(8)
            .ok_or_else(|| CheckpointError::Corrupt(format!("{what} length overflows")))?;
        Ok(self
            .take(bytes, what)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

impl Checkpoint {
    pub fn from_model(model: &VelocityModel, metadata: TrainingMetadata) -> Self {
        Self {
            architecture: model.architecture().clone(),
            weights: model.flat_weights(),
            metadata,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let a = &self.architecture;
        let mut out = Vec::with_capacity(64 + 8 * self.weights.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        for v in [a.input_dim, a.hidden_dim, a.depth, a.frequencies.len()] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for f in &a.frequencies {
            out.extend_from_slice(&f.to_le_bytes());
        }
        out.extend_from_slice(&(self.weights.len() as u64).to_le_bytes());
        for w in &self.weights {
            out.extend_from_slice(&w.to_le_bytes());
        }
        let meta = serde_json::to_vec(&self.metadata).expect("metadata serializes");
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        let hash = fnv1a(&out);
        out.extend_from_slice(&hash.to_le_bytes());
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, CheckpointError> {
        if buf.len() < 4 || &buf[..4] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let mut r = Reader { buf, pos: 4 };
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version { found: version });
        }
        let input_dim = r.u32("input_dim")? as usize;
        let hidden_dim = r.u32("hidden_dim")? as usize;
        let depth = r.u32("depth")? as usize;
        let n_freq = r.u32("frequency count")? as usize;
        let frequencies = r.f64s(n_freq, "frequencies")?;
        let n_weights = r.u64("weight count")? as usize;
        let weights = r.f64s(n_weights, "weights")?;
        let meta_len = r.u64("metadata length")? as usize;
        let meta = r.take(meta_len, "metadata")?;
        let body_end = r.pos;
        let hash = r.u64("checksum")?;
        if r.pos != buf.len() {
            return Err(CheckpointError::Corrupt(format!(
                "{} trailing bytes",
                buf.len() - r.pos
            )));
        }
        if fnv1a(&buf[..body_end]) != hash {
            return Err(CheckpointError::Corrupt("checksum mismatch".into()));
        }
        let metadata = serde_json::from_slice(meta)
            .map_err(|e| CheckpointError::Corrupt(format!("metadata: {e}")))?;
        let architecture = Architecture {
            input_dim,
            hidden_dim,
            depth,
            frequencies,
        };
        if architecture.validate().is_err() || architecture.num_params() != weights.len() {
            return Err(CheckpointError::Corrupt(format!(
                "{} weights do not fit {architecture:?}",
                weights.len()
            )));
        }
        Ok(Self {
            architecture,
            weights,
            metadata,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let buf = fs::read(path)?;
        Ok(Self::from_bytes(&buf)?)
    }

    pub fn into_model(self) -> Result<VelocityModel> {
        VelocityModel::from_flat(self.architecture, &self.weights)
    }

    /// Loads a model, failing unless the stored architecture equals `expected`.
    pub fn load_model(
        path: impl AsRef<Path>,
        expected: &Architecture,
    ) -> Result<(VelocityModel, TrainingMetadata)> {
        let ckpt = Self::load(path)?;
        if &ckpt.architecture != expected {
            return Err(CheckpointError::ArchitectureMismatch {
                expected: Box::new(expected.clone()),
                found: Box::new(ckpt.architecture),
            }
            .into());
        }
        let meta = ckpt.metadata.clone();
        Ok((ckpt.into_model()?, meta))
    }
}
