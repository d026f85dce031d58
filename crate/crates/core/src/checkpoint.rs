//! Flat f32 checkpoint container: `index.json` plus `params.bin` in a directory.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use dreamview_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::denoiser::Denoiser;
use crate::error::{Error, Result};

pub const INDEX_FILE: &str = "index.json";
pub const PARAMS_FILE: &str = "params.bin";
const MAX_ELEMENTS: usize = 1 << 30;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub byte_offset: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Metadata {
    pub architecture_hash: String,
    pub vocabulary: Vec<String>,
    pub probe_seed: u64,
    pub train_step: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointIndex {
    pub tensors: Vec<TensorEntry>,
    pub metadata: Metadata,
}

impl CheckpointIndex {
    /// Parses and validates an index: `f32` only, unique names, contiguous offsets.
    pub fn parse(text: &str) -> Result<Self> {
        let index: CheckpointIndex =
            serde_json::from_str(text).map_err(|e| Error::Checkpoint(format!("corrupt index: {e}")))?;
        index.validate()?;
        Ok(index)
    }

    fn validate(&self) -> Result<()> {
        let mut names = HashSet::new();
        let mut offset = 0u64;
        for entry in &self.tensors {
            if entry.dtype != "f32" {
                return Err(Error::Checkpoint(format!("{}: unsupported dtype {:?}", entry.name, entry.dtype)));
            }
            if !names.insert(entry.name.as_str()) {
                return Err(Error::Checkpoint(format!("duplicate tensor {}", entry.name)));
            }
            if entry.byte_offset != offset {
                return Err(Error::Checkpoint(format!(
                    "{}: byte_offset {} where {offset} was expected",
                    entry.name, entry.byte_offset
                )));
            }
            let numel = element_count(&entry.shape)
                .ok_or_else(|| Error::Checkpoint(format!("{}: shape {:?} too large", entry.name, entry.shape)))?;
            offset += 4 * numel as u64;
        }
        Ok(())
    }

    /// Total byte length `params.bin` must have.
    pub fn data_len(&self) -> u64 {
        self.tensors.iter().map(|e| 4 * e.shape.iter().product::<usize>() as u64).sum()
    }
}

fn element_count(shape: &[usize]) -> Option<usize> {
    shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).filter(|&n| n <= MAX_ELEMENTS)
}

/// Writes `tensors` in order; the directory is created if needed.
pub fn save(dir: &Path, tensors: &[(&str, &Tensor)], metadata: &Metadata) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(tensors.len());
    let mut bin = Vec::new();
    for (name, t) in tensors {
        entries.push(TensorEntry {
            name: name.to_string(),
            dtype: "f32".into(),
            shape: t.shape().to_vec(),
            byte_offset: bin.len() as u64,
        });
        bin.extend(t.to_le_bytes());
    }
    let index = CheckpointIndex { tensors: entries, metadata: metadata.clone() };
    index.validate()?;
    let json = serde_json::to_string_pretty(&index).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let index_path = dir.join(INDEX_FILE);
    let bin_path = dir.join(PARAMS_FILE);
    fs::write(&index_path, json + "\n").map_err(|e| Error::io(&index_path, e))?;
    fs::write(&bin_path, bin).map_err(|e| Error::io(&bin_path, e))?;
    Ok(())
}

/// Decodes `params.bin` bytes against a validated index.
pub fn decode(index: &CheckpointIndex, bin: &[u8]) -> Result<Vec<(String, Tensor)>> {
    if bin.len() as u64 != index.data_len() {
        return Err(Error::Checkpoint(format!(
            "{PARAMS_FILE} holds {} bytes, index describes {}",
            bin.len(),
            index.data_len()
        )));
    }
    let mut out = Vec::with_capacity(index.tensors.len());
    for entry in &index.tensors {
        let start = entry.byte_offset as usize;
        let numel: usize = entry.shape.iter().product();
        let data = bin[start..start + 4 * numel]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        out.push((entry.name.clone(), Tensor::new(&entry.shape, data)));
    }
    Ok(out)
}

pub fn load(dir: &Path) -> Result<(CheckpointIndex, Vec<(String, Tensor)>)> {
    let index_path = dir.join(INDEX_FILE);
    let text = fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let index = CheckpointIndex::parse(&text)?;
    let bin_path = dir.join(PARAMS_FILE);
    let bin = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    let tensors = decode(&index, &bin)?;
    Ok((index, tensors))
}

pub fn model_metadata(model: &Denoiser, train_step: u64) -> Metadata {
    Metadata {
        architecture_hash: model.architecture_hash(),
        vocabulary: model.text.vocab.tokens().to_vec(),
        probe_seed: model.probe_seed,
        train_step,
    }
}

pub fn save_model(dir: &Path, model: &Denoiser, train_step: u64) -> Result<()> {
    let tensors: Vec<_> = model.params.iter().collect();
    save(dir, &tensors, &model_metadata(model, train_step))
}

/// Rebuilds the model from a checkpoint; refuses a different architecture.
pub fn load_model(dir: &Path) -> Result<(Denoiser, u64)> {
    let (index, tensors) = load(dir)?;
    let meta = &index.metadata;
    let mut model = Denoiser::new(0, meta.probe_seed);
    if meta.vocabulary != model.text.vocab.tokens() {
        return Err(Error::Checkpoint("checkpoint vocabulary differs from this build".into()));
    }
    let expected = model.architecture_hash();
    if meta.architecture_hash != expected {
        return Err(Error::Checkpoint(format!(
            "architecture hash {} does not match this build ({expected})",
            meta.architecture_hash
        )));
    }
    model.load_params(tensors)?;
    Ok((model, meta.train_step))
}
