//! TOML run configuration for the command-line pipeline.
//!
//! ```toml
//! profile = "desk"            # or "large"; [model] keys override it
//!
//! [paths]
//! corpus = "train.jsonl"      # relative paths resolve against this file
//! stoplist = "stop.txt"       # optional
//! test = "test.jsonl"         # optional; queries for `generate`
//! workdir = "work"
//!
//! [data]
//! lowercase = true
//! vocab_size = 20000
//! min_freq = 1
//!
//! [model]
//! hidden = 64
//! integration = "pipeline"    # or "joint"
//!
//! [retrieval]
//! k = 30
//! lo = 0.3
//! hi = 0.7
//! test_k = 3
//!
//! [training]
//! eta = 1.0
//! lr = 0.001
//!
//! [decoding]
//! strategy = "beam"
//! mmi = false
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{DecodeOptions, Integration, ModelConfig, Strategy, Usage};
use crate::training::{Mode, TrainConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {msg}")]
    Parse { path: PathBuf, msg: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    #[default]
    Desk,
    Large,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub corpus: PathBuf,
    #[serde(default)]
    pub stoplist: Option<PathBuf>,
    #[serde(default)]
    pub test: Option<PathBuf>,
    #[serde(default = "default_workdir")]
    pub workdir: PathBuf,
}

fn default_workdir() -> PathBuf {
    PathBuf::from("work")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub lowercase: bool,
    pub vocab_size: usize,
    pub min_freq: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { lowercase: true, vocab_size: 20_000, min_freq: 1 }
    }
}

/// Model sizes; unset keys come from the profile.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub emb: Option<usize>,
    pub hidden: Option<usize>,
    pub layers: Option<usize>,
    pub skeleton_layers: Option<usize>,
    pub attn: Option<usize>,
    pub dropout: Option<f64>,
    pub integration: Option<Integration>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrievalSection {
    pub k: usize,
    pub lo: f64,
    pub hi: f64,
    /// compute the band similarity on stop-word-filtered responses
    pub filter_stopwords: bool,
    pub max_quads: Option<usize>,
    /// retrieved pairs used per query at generation time
    pub test_k: usize,
}

impl Default for RetrievalSection {
    fn default() -> Self {
        Self { k: 30, lo: 0.3, hi: 0.7, filter_stopwords: false, max_quads: None, test_k: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub eta: f64,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    pub baseline_decay: f64,
    pub clip_norm: f64,
    pub max_len: usize,
    /// separate settings for the policy-gradient stage
    pub cascade_lr: f64,
    pub cascade_epochs: usize,
    pub critic_epochs: usize,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            eta: t.eta,
            lr: t.lr,
            batch: t.batch,
            epochs: t.epochs,
            seed: t.seed,
            baseline_decay: t.baseline_decay,
            clip_norm: t.clip_norm,
            max_len: t.max_len,
            cascade_lr: 1e-4,
            cascade_epochs: 2,
            critic_epochs: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodingSection {
    pub strategy: Strategy,
    pub width: usize,
    pub max_len: usize,
    pub mmi: bool,
    pub usage: Usage,
    pub threshold: f64,
}

impl Default for DecodingSection {
    fn default() -> Self {
        let d = DecodeOptions::default();
        Self {
            strategy: d.strategy,
            width: d.width,
            max_len: d.max_len,
            mmi: false,
            usage: d.usage,
            threshold: d.threshold,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub profile: Profile,
    pub paths: Paths,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub retrieval: RetrievalSection,
    #[serde(default)]
    pub training: TrainingSection,
    #[serde(default)]
    pub decoding: DecodingSection,
}

impl RunConfig {
    /// Parses and validates; relative paths are resolved against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self, ConfigError> {
        let mut cfg: RunConfig =
            toml::from_str(text).map_err(|e| ConfigError::Parse { path: base.to_owned(), msg: e.to_string() })?;
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.paths.corpus);
        resolve(&mut cfg.paths.workdir);
        cfg.paths.stoplist.as_mut().map(resolve);
        cfg.paths.test.as_mut().map(resolve);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io { path: path.to_owned(), source: e })?;
        let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        Self::parse(&text, base).map_err(|e| match e {
            ConfigError::Parse { msg, .. } => ConfigError::Parse { path: path.to_owned(), msg },
            other => other,
        })
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        self.model_config().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.train_config(Mode::Joint).validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let r = &self.retrieval;
        if r.k == 0 || r.test_k == 0 {
            return bad("retrieval.k and retrieval.test_k must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&r.lo) || !(0.0..=1.0).contains(&r.hi) || r.lo > r.hi {
            return bad(format!("retrieval band [{}, {}] must satisfy 0 <= lo <= hi <= 1", r.lo, r.hi));
        }
        let d = &self.decoding;
        if d.width == 0 || d.max_len == 0 {
            return bad("decoding.width and decoding.max_len must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&d.threshold) {
            return bad(format!("decoding.threshold {} outside [0, 1]", d.threshold));
        }
        if self.data.vocab_size == 0 {
            return bad("data.vocab_size must be at least 1".into());
        }
        let t = &self.training;
        if !(t.cascade_lr > 0.0) || t.cascade_epochs == 0 || t.critic_epochs == 0 {
            return bad("training.cascade_lr, cascade_epochs and critic_epochs must be positive".into());
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        let base = match self.profile {
            Profile::Desk => ModelConfig::desk(),
            Profile::Large => ModelConfig::large(),
        };
        let m = &self.model;
        ModelConfig {
            emb: m.emb.unwrap_or(base.emb),
            hidden: m.hidden.unwrap_or(base.hidden),
            layers: m.layers.unwrap_or(base.layers),
            skeleton_layers: m.skeleton_layers.unwrap_or(base.skeleton_layers),
            attn: m.attn.unwrap_or(base.attn),
            dropout: m.dropout.unwrap_or(base.dropout),
        }
    }

    pub fn integration(&self) -> Integration {
        self.model.integration.unwrap_or(Integration::Pipeline)
    }

    pub fn train_config(&self, mode: Mode) -> TrainConfig {
        let t = &self.training;
        let (lr, epochs) = match mode {
            Mode::Cascade => (t.cascade_lr, t.cascade_epochs),
            Mode::Critic => (t.lr, t.critic_epochs),
            _ => (t.lr, t.epochs),
        };
        TrainConfig {
            mode,
            eta: t.eta,
            lr,
            batch: t.batch,
            epochs,
            seed: t.seed,
            baseline_decay: t.baseline_decay,
            clip_norm: t.clip_norm,
            max_len: t.max_len,
        }
    }

    pub fn decode_options(&self) -> DecodeOptions {
        let d = &self.decoding;
        DecodeOptions {
            strategy: d.strategy,
            width: d.width,
            max_len: d.max_len,
            usage: d.usage,
            threshold: d.threshold,
        }
    }

    /// SHA-256 of the resolved configuration, recorded in the manifest.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(json))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<RunConfig, ConfigError> {
        RunConfig::parse(s, Path::new("/base"))
    }

    #[test]
    fn minimal_uses_desk_defaults() {
        let c = parse("[paths]\ncorpus = \"c.jsonl\"\n").unwrap();
        assert_eq!(c.paths.corpus, PathBuf::from("/base/c.jsonl"));
        assert_eq!(c.paths.workdir, PathBuf::from("/base/work"));
        assert_eq!(c.model_config(), ModelConfig::desk());
        assert_eq!(c.retrieval.k, 30);
        assert_eq!((c.retrieval.lo, c.retrieval.hi), (0.3, 0.7));
        assert_eq!(c.training.eta, 1.0);
    }

    #[test]
    fn large_profile_and_overrides() {
        let c = parse(
            "profile = \"large\"\n[paths]\ncorpus = \"/abs.jsonl\"\n[model]\nhidden = 10\nintegration = \"joint\"\n",
        )
        .unwrap();
        let m = c.model_config();
        assert_eq!((m.emb, m.hidden, m.layers, m.dropout), (300, 10, 2, 0.3));
        assert_eq!(c.integration(), Integration::Joint);
        assert_eq!(c.paths.corpus, PathBuf::from("/abs.jsonl"));
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(parse("[paths]\ncorpus = \"c\"\nextra = 1\n"), Err(ConfigError::Parse { .. })));
        assert!(matches!(
            parse("[paths]\ncorpus = \"c\"\n[training]\nlearning_rate = 1\n"),
            Err(ConfigError::Parse { .. })
        ));
        assert!(matches!(parse("[paths]\ncorpus = \"c\"\n[bogus]\n"), Err(ConfigError::Parse { .. })));
    }

    #[test]
    fn invalid_values_rejected() {
        for extra in [
            "[retrieval]\nlo = 0.8\nhi = 0.2\n",
            "[training]\neta = -1.0\n",
            "[model]\ndropout = 1.5\n",
            "[decoding]\nwidth = 0\n",
        ] {
            let text = format!("[paths]\ncorpus = \"c\"\n{extra}");
            assert!(matches!(parse(&text), Err(ConfigError::Invalid(_))), "{extra}");
        }
    }

    #[test]
    fn hash_tracks_content() {
        let a = parse("[paths]\ncorpus = \"c\"\n").unwrap();
        let b = parse("[paths]\ncorpus = \"c\"\n[training]\nseed = 8\n").unwrap();
        assert_eq!(a.hash(), a.clone().hash());
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
