//! Tokenizers, corpus ingestion and batch sampling.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mix_seed;
use crate::tensor::ops::IGNORE_INDEX;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Tokenizer {
    /// Ids 0..=255 are raw bytes.
    Byte,
    /// One id per distinct character seen when the vocabulary was built.
    Char { chars: Vec<char> },
}

impl Tokenizer {
    pub fn byte() -> Self {
        Tokenizer::Byte
    }

    /// A character vocabulary over `text`, sorted for determinism.
    pub fn char_vocab(text: &str) -> Self {
        let mut chars: Vec<char> = text.chars().collect();
        chars.sort_unstable();
        chars.dedup();
        Tokenizer::Char { chars }
    }

    fn base(&self) -> u32 {
        match self {
            Tokenizer::Byte => 256,
            Tokenizer::Char { chars } => chars.len() as u32,
        }
    }

    pub fn pad_id(&self) -> u32 {
        self.base()
    }

    pub fn begin_id(&self) -> u32 {
        self.base() + 1
    }

    /// End of text; also separates documents in a corpus stream.
    pub fn end_id(&self) -> u32 {
        self.base() + 2
    }

    pub fn vocab_size(&self) -> usize {
        self.base() as usize + 3
    }

    pub fn is_special(&self, id: u32) -> bool {
        id >= self.base()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        match self {
            Tokenizer::Byte => Ok(text.bytes().map(u32::from).collect()),
            Tokenizer::Char { chars } => {
                let index: HashMap<char, u32> = chars.iter().enumerate().map(|(i, &c)| (c, i as u32)).collect();
                text.chars()
                    .map(|c| {
                        index
                            .get(&c)
                            .copied()
                            .ok_or_else(|| Error::Input(format!("character {c:?} is not in the vocabulary")))
                    })
                    .collect()
            }
        }
    }

    /// Text for `ids`, skipping special tokens. Byte sequences that are not
    /// valid UTF-8 are decoded lossily.
    pub fn decode(&self, ids: &[u32]) -> String {
        let ids = ids.iter().copied().filter(|&i| !self.is_special(i));
        match self {
            Tokenizer::Byte => {
                let bytes: Vec<u8> = ids.map(|i| i as u8).collect();
                String::from_utf8_lossy(&bytes).into_owned()
            }
            Tokenizer::Char { chars } => ids.filter_map(|i| chars.get(i as usize)).collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

/// All `.txt` files below `dir`, recursively, in sorted order.
pub fn corpus_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let entries = fs::read_dir(&d).map_err(|source| Error::Ingest { path: d.clone(), source })?;
        for entry in entries {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.extension().is_some_and(|e| e == "txt") {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}

pub fn read_texts(paths: &[PathBuf]) -> Result<Vec<String>> {
    let mut sorted = paths.to_vec();
    sorted.sort();
    sorted
        .into_iter()
        .map(|path| {
            let bytes = fs::read(&path).map_err(|source| Error::Ingest { path: path.clone(), source })?;
            String::from_utf8(bytes).map_err(|e| Error::Ingest {
                path,
                source: std::io::Error::new(std::io::ErrorKind::InvalidData, e),
            })
        })
        .collect()
}

/// Concatenates the files in sorted path order with the end token between
/// consecutive documents.
pub fn ingest_corpus(paths: &[PathBuf], tok: &Tokenizer) -> Result<Vec<u32>> {
    let texts = read_texts(paths)?;
    encode_documents(&texts, tok)
}

pub fn encode_documents(texts: &[String], tok: &Tokenizer) -> Result<Vec<u32>> {
    let mut stream = Vec::new();
    for (i, text) in texts.iter().enumerate() {
        if i > 0 {
            stream.push(tok.end_id());
        }
        stream.extend(tok.encode(text)?);
    }
    Ok(stream)
}

/// Splits off the last `fraction` of the stream for validation.
pub fn split_holdout(stream: &[u32], fraction: f32) -> (&[u32], &[u32]) {
    let held = ((stream.len() as f64) * fraction as f64).round() as usize;
    stream.split_at(stream.len() - held.min(stream.len()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainBatch {
    pub batch: usize,
    pub seq_len: usize,
    /// `[B, T]`
    pub inputs: Vec<u32>,
    /// `[B, T]`, `IGNORE_INDEX` where the mask is off.
    pub targets: Vec<u32>,
    pub mask: Vec<bool>,
    /// Window start of each row in the source stream.
    pub starts: Vec<usize>,
}

/// `batch` random windows of `seq_len + 1` tokens.
pub fn sample_batch<R: Rng + ?Sized>(stream: &[u32], batch: usize, seq_len: usize, rng: &mut R) -> Result<TrainBatch> {
    let window = seq_len + 1;
    if stream.len() < batch * window {
        return Err(Error::Data(format!(
            "token stream of {} is shorter than batch {batch} x window {window}",
            stream.len()
        )));
    }
    let last_start = stream.len() - window;
    let mut out = TrainBatch {
        batch,
        seq_len,
        inputs: Vec::with_capacity(batch * seq_len),
        targets: Vec::with_capacity(batch * seq_len),
        mask: vec![true; batch * seq_len],
        starts: Vec::with_capacity(batch),
    };
    for _ in 0..batch {
        let s = rng.random_range(0..=last_start);
        out.starts.push(s);
        out.inputs.extend_from_slice(&stream[s..s + seq_len]);
        out.targets.extend_from_slice(&stream[s + 1..s + window]);
    }
    for (t, &m) in out.targets.iter_mut().zip(&out.mask) {
        if !m {
            *t = IGNORE_INDEX;
        }
    }
    Ok(out)
}

/// The batch for `iteration`, a pure function of `(seed, iteration)`.
pub fn batch_for_iteration(stream: &[u32], batch: usize, seq_len: usize, seed: u64, iteration: u64) -> Result<TrainBatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, iteration));
    sample_batch(stream, batch, seq_len, &mut rng)
}

/// Endless seeded batch sequence.
pub fn make_batches(stream: &[u32], batch: usize, seq_len: usize, seed: u64) -> Result<impl Iterator<Item = TrainBatch> + '_> {
    // fail early on a short stream
    batch_for_iteration(stream, batch, seq_len, seed, 0)?;
    Ok((0u64..).map(move |i| batch_for_iteration(stream, batch, seq_len, seed, i).expect("length checked")))
}
