//! Binary checkpoint: magic, config digest and text, statistics, prompt,
//! and a named table of single-precision tensors. Integers are
//! little-endian `u32`, strings are length-prefixed UTF-8.

use std::fs;
use std::path::Path;

use thiserror::Error;

use super::{ModelConfig, ModelError, ModelState};
use crate::geo::NormStats;
use crate::ingest::DurBounds;
use crate::nn::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"NXLL1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("truncated or malformed checkpoint: {0}")]
    Malformed(String),
    #[error("config digest mismatch: checkpoint {found}, expected {expected}")]
    DigestMismatch { found: String, expected: String },
    #[error("location table mismatch: checkpoint {found}, dataset {expected}")]
    LocationMismatch { found: String, expected: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// A loaded model plus the metadata stored beside it.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub state: ModelState,
    pub config_digest: String,
    /// Digest of the location table the model was trained on.
    pub locations_digest: String,
}

impl Checkpoint {
    /// Refuses a dataset whose location table differs from the training one.
    pub fn check_locations(&self, digest: &str, force: bool) -> Result<(), CheckpointError> {
        if !force && self.locations_digest != digest {
            return Err(CheckpointError::LocationMismatch {
                found: self.locations_digest.clone(),
                expected: digest.to_string(),
            });
        }
        Ok(())
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: usize) {
        self.0.extend((v as u32).to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.0.extend(v.to_le_bytes());
    }

    fn str(&mut self, s: &str) {
        self.u32(s.len());
        self.0.extend(s.as_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| CheckpointError::Malformed(format!("need {n} bytes at offset {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn str(&mut self) -> Result<String, CheckpointError> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| CheckpointError::Malformed(e.to_string()))
    }
}

pub fn encode_checkpoint(state: &ModelState, locations_digest: &str) -> Vec<u8> {
    let mut w = Writer(CHECKPOINT_MAGIC.to_vec());
    w.str(&state.config.digest());
    w.str(&state.config.to_text());
    w.str(locations_digest);
    w.str(&state.prompt.text);
    let s = &state.norm_stats;
    for v in [s.mean_x, s.mean_y, s.std_x, s.std_y, state.dur_bounds.min, state.dur_bounds.max] {
        w.f64(v);
    }
    let entries = state.store.entries();
    w.u32(entries.len());
    for e in entries {
        w.str(&e.name);
        w.0.push(e.trainable as u8);
        w.u32(e.value.rows());
        w.u32(e.value.cols());
        for &v in e.value.data() {
            w.0.extend((v as f32).to_le_bytes());
        }
    }
    w.0
}

/// Parses a checkpoint. With `expected_digest` set, a different stored
/// config digest is refused unless `force`.
pub fn decode_checkpoint(buf: &[u8], expected_digest: Option<&str>, force: bool) -> Result<Checkpoint, CheckpointError> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(CHECKPOINT_MAGIC.len()).ok() != Some(&CHECKPOINT_MAGIC[..]) {
        return Err(CheckpointError::BadMagic);
    }
    let digest = r.str()?;
    let text = r.str()?;
    let config = ModelConfig::from_text(&text)?;
    let actual = config.digest();
    if !force {
        if actual != digest {
            return Err(CheckpointError::DigestMismatch { found: digest, expected: actual });
        }
        if let Some(want) = expected_digest {
            if want != digest {
                return Err(CheckpointError::DigestMismatch { found: digest, expected: want.to_string() });
            }
        }
    }
    let locations_digest = r.str()?;
    let prompt_text = r.str()?;
    let mut stats = [0.0; 6];
    for v in &mut stats {
        *v = r.f64()?;
    }
    let norm_stats = NormStats { mean_x: stats[0], mean_y: stats[1], std_x: stats[2], std_y: stats[3] };
    let dur_bounds = DurBounds { min: stats[4], max: stats[5] };
    let mut state = ModelState::skeleton(config, 0, norm_stats, dur_bounds)?;
    if state.prompt.text != prompt_text {
        return Err(CheckpointError::Malformed("prompt text disagrees with config".into()));
    }
    let count = r.u32()?;
    if count != state.store.len() {
        return Err(CheckpointError::Malformed(format!("{count} tensors, layout has {}", state.store.len())));
    }
    for _ in 0..count {
        let name = r.str()?;
        let trainable = r.u8()? != 0;
        let rows = r.u32()?;
        let cols = r.u32()?;
        let id = state.store.find(&name).ok_or_else(|| CheckpointError::Malformed(format!("unknown tensor {name}")))?;
        if state.store.value(id).shape() != (rows, cols) {
            return Err(CheckpointError::Malformed(format!("tensor {name} has shape {rows}x{cols}")));
        }
        let raw = r.take(rows * cols * 4)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
        *state.store.value_mut(id) = Tensor::from_vec(rows, cols, data);
        state.store.set_trainable(id, trainable);
    }
    if r.pos != buf.len() {
        return Err(CheckpointError::Malformed("trailing bytes".into()));
    }
    if let Some(name) = state.store.all_finite() {
        return Err(CheckpointError::Malformed(format!("tensor {name} holds non-finite values")));
    }
    Ok(Checkpoint { state, config_digest: digest, locations_digest })
}

pub fn save_checkpoint(path: &Path, state: &ModelState, locations_digest: &str) -> Result<(), CheckpointError> {
    fs::write(path, encode_checkpoint(state, locations_digest))
        .map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })
}

pub fn load_checkpoint(path: &Path, expected_digest: Option<&str>, force: bool) -> Result<Checkpoint, CheckpointError> {
    let buf = fs::read(path).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
    decode_checkpoint(&buf, expected_digest, force)
}
