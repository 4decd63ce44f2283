//! Binary checkpoints: `SKR1` magic, u32 version, u64 metadata length, JSON
//! metadata, then little-endian f32 payloads in manifest order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::error::ModelError;
use crate::model::{Components, Integration, ModelConfig, ModelSet};
use crate::text::Vocab;

pub const MAGIC: &[u8; 4] = b"SKR1";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}: not a checkpoint (bad magic)")]
    BadMagic(PathBuf),
    #[error("{path}: unsupported checkpoint version {found} (expected {VERSION})")]
    Version { path: PathBuf, found: u32 },
    #[error("{path}: malformed metadata: {msg}")]
    Metadata { path: PathBuf, msg: String },
    #[error("{path}: payload ends early")]
    Truncated { path: PathBuf },
    #[error("checkpoint is missing parameters: {}", .0.join(", "))]
    MissingParams(Vec<String>),
    #[error("checkpoint has unknown parameters: {}", .0.join(", "))]
    UnknownParams(Vec<String>),
    #[error("parameter {name}: shape {found:?} does not match {expected:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: String,
    pub integration: Integration,
    pub components: Components,
    pub config: ModelConfig,
    pub stages: Vec<String>,
    pub vocab_hash: String,
    pub vocab: Vocab,
    /// sorted by name; payloads follow in this order
    pub params: Vec<ParamEntry>,
}

pub fn vocab_hash(vocab: &Vocab) -> String {
    let mut h = Sha256::new();
    for t in vocab.tokens() {
        h.update(t.as_bytes());
        h.update(b"\n");
    }
    format!("{:x}", h.finalize())
}

/// Writes `models` to `path`. Parameters are first rounded to f32 in place,
/// so the in-memory model matches what a later load returns.
pub fn save_checkpoint(models: &mut ModelSet, kind: &str, path: &Path) -> Result<(), CheckpointError> {
    let io = |e| CheckpointError::Io { path: path.to_owned(), source: e };
    models.store.round_to_f32();
    let names: Vec<(String, crate::autodiff::ParamId)> =
        models.store.sorted_names().map(|(n, id)| (n.to_owned(), id)).collect();
    let meta = CheckpointMeta {
        kind: kind.to_owned(),
        integration: models.integration,
        components: models.components(),
        config: models.config,
        stages: models.stages.clone(),
        vocab_hash: vocab_hash(&models.vocab),
        vocab: models.vocab.clone(),
        params: names
            .iter()
            .map(|(n, id)| ParamEntry { name: n.clone(), shape: models.store.tensor(*id).shape().to_vec() })
            .collect(),
    };
    let json = serde_json::to_vec(&meta)
        .map_err(|e| CheckpointError::Metadata { path: path.to_owned(), msg: e.to_string() })?;
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&json).map_err(io)?;
    for (_, id) in &names {
        for &x in models.store.tensor(*id).data() {
            w.write_all(&(x as f32).to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

/// Reads metadata and named tensors without building a model.
pub fn read_checkpoint(path: &Path) -> Result<(CheckpointMeta, Vec<(String, Tensor)>), CheckpointError> {
    let io = |e| CheckpointError::Io { path: path.to_owned(), source: e };
    let mut r = BufReader::new(File::open(path).map_err(io)?);
    let truncated = |e: std::io::Error| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            CheckpointError::Truncated { path: path.to_owned() }
        } else {
            CheckpointError::Io { path: path.to_owned(), source: e }
        }
    };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| CheckpointError::BadMagic(path.to_owned()))?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic(path.to_owned()));
    }
    let mut u32b = [0u8; 4];
    r.read_exact(&mut u32b).map_err(truncated)?;
    let version = u32::from_le_bytes(u32b);
    if version != VERSION {
        return Err(CheckpointError::Version { path: path.to_owned(), found: version });
    }
    let mut u64b = [0u8; 8];
    r.read_exact(&mut u64b).map_err(truncated)?;
    let len = usize::try_from(u64::from_le_bytes(u64b))
        .map_err(|_| CheckpointError::Metadata { path: path.to_owned(), msg: "length overflow".into() })?;
    let mut json = Vec::new();
    (&mut r).take(len as u64).read_to_end(&mut json).map_err(io)?;
    if json.len() != len {
        return Err(CheckpointError::Truncated { path: path.to_owned() });
    }
    let meta: CheckpointMeta = serde_json::from_slice(&json)
        .map_err(|e| CheckpointError::Metadata { path: path.to_owned(), msg: e.to_string() })?;
    if meta.vocab_hash != vocab_hash(&meta.vocab) {
        return Err(CheckpointError::Metadata { path: path.to_owned(), msg: "vocabulary hash mismatch".into() });
    }
    let mut tensors = Vec::with_capacity(meta.params.len());
    for p in &meta.params {
        let n: usize = p.shape.iter().product();
        let mut buf = vec![0u8; 4 * n];
        r.read_exact(&mut buf).map_err(truncated)?;
        let data = buf.chunks_exact(4).map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]]))).collect();
        let t = Tensor::new(&p.shape, data).map_err(ModelError::from)?;
        tensors.push((p.name.clone(), t));
    }
    Ok((meta, tensors))
}

/// Copies tensors into matching parameters of `models`. Every parameter whose
/// name starts with one of `prefixes` must be present in `tensors`; tensors
/// outside those prefixes are ignored.
pub(crate) fn fill_params(
    models: &mut ModelSet,
    tensors: &[(String, Tensor)],
    prefixes: &[&str],
) -> Result<(), CheckpointError> {
    let wanted = |n: &str| prefixes.iter().any(|p| n.starts_with(p));
    let mut seen = std::collections::HashSet::new();
    for (name, t) in tensors.iter().filter(|(n, _)| wanted(n)) {
        let Some(id) = models.store.id(name) else { continue };
        let expected = models.store.tensor(id).shape().to_vec();
        if expected != t.shape() {
            return Err(CheckpointError::ShapeMismatch { name: name.clone(), expected, found: t.shape().to_vec() });
        }
        models.store.get_mut(id).tensor = t.clone();
        seen.insert(name.as_str());
    }
    let missing: Vec<String> = models
        .store
        .sorted_names()
        .filter(|(n, _)| wanted(n) && !seen.contains(n))
        .map(|(n, _)| n.to_owned())
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(CheckpointError::MissingParams(missing))
    }
}

/// Rebuilds the model set stored at `path`.
pub fn load_checkpoint(path: &Path) -> Result<(ModelSet, CheckpointMeta), CheckpointError> {
    let (meta, tensors) = read_checkpoint(path)?;
    let mut models = ModelSet::new(meta.config, meta.vocab.clone(), meta.integration, meta.components, 0)?;
    let unknown: Vec<String> =
        tensors.iter().filter(|(n, _)| models.store.id(n).is_none()).map(|(n, _)| n.clone()).collect();
    if !unknown.is_empty() {
        return Err(CheckpointError::UnknownParams(unknown));
    }
    fill_params(&mut models, &tensors, &[""])?;
    models.stages = meta.stages.clone();
    Ok((models, meta))
}

impl ModelSet {
    /// Loads the parameters under `prefixes` from another checkpoint of the
    /// same vocabulary and configuration, and adopts its stages.
    pub fn merge_checkpoint(&mut self, path: &Path, prefixes: &[&str]) -> Result<(), CheckpointError> {
        let (meta, tensors) = read_checkpoint(path)?;
        if meta.vocab_hash != vocab_hash(&self.vocab) {
            return Err(CheckpointError::Incompatible(format!("{} uses a different vocabulary", path.display())));
        }
        if meta.config != self.config {
            return Err(CheckpointError::Incompatible(format!(
                "{} uses a different model configuration",
                path.display()
            )));
        }
        fill_params(self, &tensors, prefixes)?;
        for s in &meta.stages {
            self.mark_stage(s);
        }
        Ok(())
    }
}
