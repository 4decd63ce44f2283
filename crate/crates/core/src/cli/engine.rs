//! A loaded generator with its retrieval index, shared by `generate`, `chat`
//! and the C interface.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::stages::{checkpoint_name, read_json};
use super::workdir::{Workdir, PAIRS, QUERY_INDEX};
use super::CliError;
use crate::config::RunConfig;
use crate::dataset::{test_retrieval, DialoguePair, InvertedIndex};
use crate::jsonl;
use crate::model::{Components, Integration, ModelSet, Strategy};
use crate::text::{jaccard, join, tokenize, TokenSeq, BLANK};
use crate::training::{load_checkpoint, Mode};

pub const INVERSE_CKPT: &str = "inverse.ckpt";

/// One generated response with the retrieved pair and skeleton behind it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub q: String,
    /// gold response, when the input provides one
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r: Option<String>,
    pub rq: String,
    pub rr: String,
    /// Jaccard similarity of the query and the retrieved query
    pub similarity: f64,
    pub skeleton: String,
    /// keep labels the skeleton generator chose over `rr`
    pub m: Vec<u8>,
    pub response: String,
    pub logprob: f64,
    pub normalized: f64,
    pub gate_mean: f64,
}

pub struct Engine {
    cfg: RunConfig,
    models: ModelSet,
    inverse: Option<ModelSet>,
    pairs: Vec<DialoguePair>,
    index: InvertedIndex,
    sources: Vec<PathBuf>,
}

impl Engine {
    /// Loads the generator for `cfg`'s integration from its work directory.
    ///
    /// Pipeline integration prefers the cascade checkpoint and otherwise
    /// combines the separately trained generators. `checkpoint` overrides
    /// the choice. With `mmi` (or `decoding.mmi`) the inverse model is loaded too.
    pub fn open(cfg: RunConfig, checkpoint: Option<PathBuf>, mmi: bool) -> Result<Self, CliError> {
        let work = Workdir::open(&cfg.paths.workdir, cfg.hash())?;
        let (models, mut sources) = load_generator(&cfg, &work, checkpoint)?;
        let inverse = if mmi || cfg.decoding.mmi {
            if cfg.decoding.strategy == Strategy::Greedy {
                log::warn!("MMI reranking only applies to beam search; decoding.strategy is greedy");
            }
            let p = work.require(INVERSE_CKPT, "s2r train --mode res-mle --inverse")?;
            let m = load_checkpoint(&p)?.0;
            sources.push(p);
            Some(m)
        } else {
            None
        };
        let pp = work.require(PAIRS, "s2r index")?;
        let ip = work.require(QUERY_INDEX, "s2r index")?;
        let pairs = jsonl::read(&pp)?;
        let index = read_json(&ip)?;
        sources.extend([pp, ip]);
        Ok(Self { cfg, models, inverse, pairs, index, sources })
    }

    pub fn from_config_file(path: &Path) -> Result<Self, CliError> {
        Self::open(RunConfig::load(path)?, None, false)
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn models(&self) -> &ModelSet {
        &self.models
    }

    /// Files the engine was loaded from.
    pub fn sources(&self) -> &[PathBuf] {
        &self.sources
    }

    /// Tokenizes `text` as configured and responds. `None` when no indexed
    /// query shares a token with it.
    pub fn respond(&self, text: &str) -> Result<Option<GenerationRecord>, CliError> {
        self.respond_tokens(&tokenize(text, self.cfg.data.lowercase), None)
    }

    pub fn respond_tokens(&self, q: &TokenSeq, gold: Option<&TokenSeq>) -> Result<Option<GenerationRecord>, CliError> {
        let hits = test_retrieval(&self.index, q, self.cfg.retrieval.test_k);
        if hits.is_empty() {
            return Ok(None);
        }
        let retrieved: Vec<(TokenSeq, TokenSeq)> =
            hits.iter().map(|h| (self.pairs[h.id].query.clone(), self.pairs[h.id].response.clone())).collect();
        let g = self.models.respond(q, &retrieved, &self.cfg.decode_options(), self.inverse.as_ref())?;
        let (rq, rr) = &retrieved[g.chosen];
        let skeleton = &g.skeletons[g.chosen];
        Ok(Some(GenerationRecord {
            q: join(q),
            r: gold.map(|r| join(r)),
            rq: join(rq),
            rr: join(rr),
            similarity: jaccard(q, rq),
            skeleton: join(skeleton),
            m: skeleton.iter().map(|t| u8::from(t != BLANK)).collect(),
            response: join(&g.response),
            logprob: g.log_prob,
            normalized: g.normalized,
            gate_mean: g.gate_mean,
        }))
    }
}

fn load_generator(
    cfg: &RunConfig,
    work: &Workdir,
    checkpoint: Option<PathBuf>,
) -> Result<(ModelSet, Vec<PathBuf>), CliError> {
    let (models, files) = if let Some(p) = checkpoint {
        if !p.is_file() {
            return Err(CliError::Missing(format!("checkpoint {} not found", p.display())));
        }
        (load_checkpoint(&p)?.0, vec![p])
    } else if cfg.integration() == Integration::Joint {
        let p = work.require(&checkpoint_name(Mode::Joint), "s2r train --mode joint")?;
        (load_checkpoint(&p)?.0, vec![p])
    } else if work.exists(&checkpoint_name(Mode::Cascade)) {
        let p = work.path(&checkpoint_name(Mode::Cascade));
        (load_checkpoint(&p)?.0, vec![p])
    } else {
        let res = work.require(&checkpoint_name(Mode::ResMle), "s2r train --mode res-mle")?;
        let ske = work.path(&checkpoint_name(Mode::SkeMle));
        let (res_models, _) = load_checkpoint(&res)?;
        if ske.is_file() {
            let mut m = ModelSet::new(
                res_models.config,
                res_models.vocab.clone(),
                Integration::Pipeline,
                Components { skeleton: true, response: true, critic: false },
                0,
            )?;
            m.merge_checkpoint(&res, &["res."])?;
            m.merge_checkpoint(&ske, &["ske."])?;
            (m, vec![res, ske])
        } else {
            log::warn!("no skeleton generator checkpoint; retrieved responses are used unmasked");
            (res_models, vec![res])
        }
    };
    if models.response.is_none() {
        return Err(CliError::Config("the checkpoint has no response generator".into()));
    }
    Ok((models, files))
}
