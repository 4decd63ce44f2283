//! Artifact layout of a work directory and the manifest tying every file to
//! the config hash and input hashes that produced it.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::CliError;
use crate::config::hex;

pub const PAIRS: &str = "pairs.jsonl";
pub const VOCAB: &str = "vocab.json";
pub const RESPONSE_INDEX: &str = "index.response.json";
pub const QUERY_INDEX: &str = "index.query.json";
pub const QUADS: &str = "quads.jsonl";
pub const SKELETONS: &str = "skeletons.jsonl";
pub const GENERATIONS: &str = "generations.jsonl";
pub const MANIFEST: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    pub stage: String,
    pub config_hash: String,
    pub sha256: String,
    /// input file -> its sha256 when the artifact was written
    pub inputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub artifacts: BTreeMap<String, ArtifactRecord>,
}

impl Default for Manifest {
    fn default() -> Self {
        Self { version: MANIFEST_VERSION, artifacts: BTreeMap::new() }
    }
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let mut f = fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| CliError::io(path, e))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex(&h.finalize()))
}

pub struct Workdir {
    root: PathBuf,
    config_hash: String,
}

impl Workdir {
    pub fn open(root: &Path, config_hash: String) -> Result<Self, CliError> {
        fs::create_dir_all(root).map_err(|e| CliError::io(root, e))?;
        Ok(Self { root: root.to_owned(), config_hash })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn exists(&self, name: &str) -> bool {
        self.path(name).is_file()
    }

    /// Path of a prerequisite artifact, or a missing-prerequisite error
    /// telling the user which command produces it.
    pub fn require(&self, name: &str, remedy: &str) -> Result<PathBuf, CliError> {
        let p = self.path(name);
        if p.is_file() {
            Ok(p)
        } else {
            Err(CliError::Missing(format!("{} not found; run `{remedy}` first", p.display())))
        }
    }

    pub fn manifest(&self) -> Result<Manifest, CliError> {
        let p = self.path(MANIFEST);
        if !p.is_file() {
            return Ok(Manifest::default());
        }
        let text = fs::read_to_string(&p).map_err(|e| CliError::io(&p, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Run(format!("{}: {e}", p.display())))
    }

    /// Records `outputs` (names inside the workdir) as produced by `stage`
    /// from `inputs` (arbitrary paths).
    pub fn record(&self, stage: &str, outputs: &[&str], inputs: &[PathBuf]) -> Result<(), CliError> {
        let mut m = self.manifest()?;
        let mut ins = BTreeMap::new();
        for p in inputs {
            let key = match p.strip_prefix(&self.root) {
                Ok(rel) => rel.display().to_string(),
                Err(_) => p.display().to_string(),
            };
            ins.insert(key, sha256_file(p)?);
        }
        for name in outputs {
            let rec = ArtifactRecord {
                stage: stage.to_owned(),
                config_hash: self.config_hash.clone(),
                sha256: sha256_file(&self.path(name))?,
                inputs: ins.clone(),
            };
            m.artifacts.insert((*name).to_owned(), rec);
        }
        let p = self.path(MANIFEST);
        let mut text = serde_json::to_string_pretty(&m).expect("manifest serializes");
        text.push('\n');
        fs::write(&p, text).map_err(|e| CliError::io(&p, e))
    }
}
