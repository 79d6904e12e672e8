//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "CFHRM1"
//! u32 config length, config JSON
//! u32 tensor count
//! per tensor: u32 name length, name, u32 rank, u64 dims, f32 values
//! u64 FNV-1a hash of everything between the magic and the hash
//! ```

use std::fs;
use std::path::Path;

use crate::config::ModelConfig;
use crate::error::{CheckpointError, Result};
use crate::model::{build_model, ModelWeights};

pub const MAGIC: &[u8; 6] = b"CFHRM1";

/// A tensor as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

/// Writes the config and the given tensors. Tensors are written in order.
pub fn write_checkpoint<'a>(
    path: &Path,
    config: &ModelConfig,
    tensors: impl IntoIterator<Item = (String, &'a [usize], Vec<f32>)>,
) -> Result<()> {
    let mut payload = Vec::new();
    let json = serde_json::to_vec(config)?;
    payload.extend((json.len() as u32).to_le_bytes());
    payload.extend(json);
    let count_at = payload.len();
    payload.extend(0u32.to_le_bytes());
    let mut count = 0u32;
    for (name, shape, data) in tensors {
        payload.extend((name.len() as u32).to_le_bytes());
        payload.extend(name.as_bytes());
        payload.extend((shape.len() as u32).to_le_bytes());
        for &d in shape {
            payload.extend((d as u64).to_le_bytes());
        }
        for v in data {
            payload.extend(v.to_le_bytes());
        }
        count += 1;
    }
    payload[count_at..count_at + 4].copy_from_slice(&count.to_le_bytes());
    let mut bytes = Vec::with_capacity(payload.len() + 14);
    bytes.extend(MAGIC);
    bytes.extend(&payload);
    bytes.extend(fnv1a(&payload).to_le_bytes());
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> std::result::Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(CheckpointError::Truncated(what))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &'static str) -> std::result::Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> std::result::Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Parses a checkpoint into its config and raw tensors.
pub fn read_checkpoint(path: &Path) -> Result<(ModelConfig, Vec<StoredTensor>)> {
    let bytes = fs::read(path)?;
    Ok(parse(&bytes)?)
}

fn parse(bytes: &[u8]) -> std::result::Result<(ModelConfig, Vec<StoredTensor>), CheckpointError> {
    if bytes.len() < MAGIC.len() || &bytes[..5] != b"CFHRM" {
        return Err(CheckpointError::BadMagic);
    }
    if &bytes[..6] != MAGIC {
        return Err(CheckpointError::VersionMismatch {
            found: String::from_utf8_lossy(&bytes[..6]).into_owned(),
            expected: String::from_utf8_lossy(MAGIC).into_owned(),
        });
    }
    let mut c = Cursor { bytes, pos: MAGIC.len() };
    let len = c.u32("config length")? as usize;
    let json = c.take(len, "config")?;
    let config: ModelConfig = serde_json::from_slice(json).map_err(|e| CheckpointError::BadHeader(e.to_string()))?;
    let count = c.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let n = c.u32("tensor name")? as usize;
        let name = String::from_utf8(c.take(n, "tensor name")?.to_vec()).map_err(|_| CheckpointError::BadTensor {
            name: "?".into(),
            reason: "name is not UTF-8".into(),
        })?;
        let rank = c.u32("tensor rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(c.u64("tensor dims")? as usize);
        }
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel.filter(|&n| n <= bytes.len() / 4).ok_or(CheckpointError::Truncated("tensor data"))?;
        let raw = c.take(numel * 4, "tensor data")?;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        tensors.push(StoredTensor { name, shape, data });
    }
    let body_end = c.pos;
    let stored = c.u64("checksum")?;
    if c.pos != bytes.len() {
        return Err(CheckpointError::BadTensor {
            name: "<trailer>".into(),
            reason: format!("{} unexpected bytes after the checksum", bytes.len() - c.pos),
        });
    }
    let computed = fnv1a(&bytes[MAGIC.len()..body_end]);
    if stored != computed {
        return Err(CheckpointError::Checksum { stored, computed });
    }
    Ok((config, tensors))
}

pub fn save_checkpoint(w: &ModelWeights, config: &ModelConfig, path: &Path) -> Result<()> {
    save_with_extras(w, config, &[], path)
}

/// Model tensors followed by extra named tensors (optimizer state).
pub fn save_with_extras(w: &ModelWeights, config: &ModelConfig, extras: &[StoredTensor], path: &Path) -> Result<()> {
    let named = w.named();
    let model = named.iter().map(|(n, t)| (n.clone(), t.shape(), t.to_vec()));
    let extra = extras.iter().map(|s| (s.name.clone(), s.shape.as_slice(), s.data.clone()));
    write_checkpoint(path, config, model.chain(extra))
}

/// Rebuilds the model from a checkpoint, restoring the tied head. Tensors
/// whose names do not belong to the model are returned untouched.
pub fn load_with_extras(path: &Path) -> Result<(ModelWeights, ModelConfig, Vec<StoredTensor>)> {
    let (config, tensors) = read_checkpoint(path)?;
    config
        .validate()
        .map_err(|e| CheckpointError::BadHeader(e.to_string()))?;
    let w = build_model(&config)?;
    let named = w.named();
    let (model, extras): (Vec<_>, Vec<_>) = tensors.into_iter().partition(|t| !t.name.starts_with("optim."));
    if model.len() != named.len() {
        return Err(CheckpointError::TensorCountMismatch {
            found: model.len(),
            expected: named.len(),
        }
        .into());
    }
    for ((name, target), stored) in named.iter().zip(model) {
        if *name != stored.name {
            return Err(CheckpointError::BadTensor {
                name: stored.name,
                reason: format!("expected {name} at this position"),
            }
            .into());
        }
        if target.shape() != stored.shape.as_slice() {
            return Err(CheckpointError::BadTensor {
                name: stored.name,
                reason: format!("shape {:?}, model expects {:?}", stored.shape, target.shape()),
            }
            .into());
        }
        target.data_mut().copy_from_slice(&stored.data);
    }
    drop(named);
    Ok((w, config, extras))
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelWeights, ModelConfig)> {
    let (w, c, _) = load_with_extras(path)?;
    Ok((w, c))
}
