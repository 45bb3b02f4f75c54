//! Self-describing binary checkpoint: version byte, config snapshot,
//! named f32 tensors (little-endian), RNG state, step counter. Writes
//! go to a temp file and are atomically renamed into place.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{CoreError, Result};

pub const CHECKPOINT_VERSION: u8 = 1;
const MAGIC: &[u8; 8] = b"PSEQCKPT";

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

/// Everything needed to resume a run bit-identically.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointState {
    pub config_text: String,
    pub step: u64,
    pub rng_seed: [u8; 32],
    pub rng_word_pos: u128,
    pub tensors: Vec<NamedTensor>,
}

pub fn save_checkpoint(path: &Path, state: &CheckpointState) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.push(CHECKPOINT_VERSION);
    buf.extend_from_slice(&state.step.to_le_bytes());
    buf.extend_from_slice(&state.rng_seed);
    buf.extend_from_slice(&state.rng_word_pos.to_le_bytes());
    let cfg = state.config_text.as_bytes();
    buf.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    buf.extend_from_slice(cfg);
    buf.extend_from_slice(&(state.tensors.len() as u32).to_le_bytes());
    for t in &state.tensors {
        let name = t.name.as_bytes();
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name);
        buf.extend_from_slice(&(t.rows as u32).to_le_bytes());
        buf.extend_from_slice(&(t.cols as u32).to_le_bytes());
        if t.data.len() != t.rows * t.cols {
            return Err(CoreError::Checkpoint(format!(
                "tensor '{}' has {} values for shape ({}, {})",
                t.name,
                t.data.len(),
                t.rows,
                t.cols
            )));
        }
        for v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().map(|n| n.to_string_lossy()).unwrap_or_default()
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(CoreError::Checkpoint(format!(
                "truncated checkpoint: wanted {n} bytes at offset {}, file has {}",
                self.pos,
                self.buf.len()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<CheckpointState> {
    let mut raw = Vec::new();
    fs::File::open(path)?.read_to_end(&mut raw)?;
    let mut r = Reader { buf: &raw, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(CoreError::Checkpoint("bad magic, not a checkpoint".into()));
    }
    let version = r.take(1)?[0];
    if version != CHECKPOINT_VERSION {
        return Err(CoreError::Checkpoint(format!(
            "unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let step = r.u64()?;
    let rng_seed: [u8; 32] = r.take(32)?.try_into().unwrap();
    let rng_word_pos = r.u128()?;
    let cfg_len = r.u32()? as usize;
    let config_text = String::from_utf8(r.take(cfg_len)?.to_vec())
        .map_err(|_| CoreError::Checkpoint("config snapshot is not utf-8".into()))?;
    let n_tensors = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| CoreError::Checkpoint("tensor name is not utf-8".into()))?;
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| CoreError::Checkpoint(format!("tensor '{name}' shape overflow")))?;
        let bytes = r.take(4 * n)?;
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push(NamedTensor {
            name,
            rows,
            cols,
            data,
        });
    }
    if r.pos != raw.len() {
        return Err(CoreError::Checkpoint(format!(
            "{} trailing bytes after the last tensor",
            raw.len() - r.pos
        )));
    }
    Ok(CheckpointState {
        config_text,
        step,
        rng_seed,
        rng_word_pos,
        tensors,
    })
}
