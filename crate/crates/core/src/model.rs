//! The bundle of trained components and the end-to-end response pipeline
//! (skeleton extraction, decoding, Single/Multiple use of the retrieval set).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape, Var};
use crate::error::ModelError;
use crate::respgen::{
    beam_search, greedy, mmi_rerank, score_target, Hypothesis, Pools, ResponseConfig, ResponseGenerator, SkeletonMemory,
};
use crate::skelgen::{threshold_mask, SkeletonConfig, SkeletonGenerator, SkeletonInput};
use crate::text::{mask_tokens, TokenSeq, Vocab, BLANK_ID};
use crate::training::Critic;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub emb: usize,
    pub hidden: usize,
    /// layers of the response encoders and decoder
    pub layers: usize,
    /// layers of the skeleton biGRU
    pub skeleton_layers: usize,
    /// hidden width of the word-bag attention
    pub attn: usize,
    pub dropout: f64,
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self { emb: 32, hidden: 64, layers: 2, skeleton_layers: 1, attn: 32, dropout: 0.3 }
    }

    pub fn large() -> Self {
        Self { emb: 300, hidden: 500, layers: 2, skeleton_layers: 1, attn: 300, dropout: 0.3 }
    }

    pub fn skeleton(&self) -> SkeletonConfig {
        SkeletonConfig {
            emb: self.emb,
            hidden: self.hidden,
            layers: self.skeleton_layers,
            attn: self.attn,
            dropout: self.dropout,
        }
    }

    pub fn response(&self) -> ResponseConfig {
        ResponseConfig { emb: self.emb, hidden: self.hidden, layers: self.layers, dropout: self.dropout }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.emb == 0 || self.hidden == 0 || self.layers == 0 || self.skeleton_layers == 0 || self.attn == 0 {
            return Err(ModelError::Config("model sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// How the two generators are connected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Integration {
    /// Discrete skeleton tokens pass between separately parameterized stages.
    Pipeline,
    /// The response decoder attends over the skeleton generator's states.
    Joint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Components {
    pub skeleton: bool,
    pub response: bool,
    pub critic: bool,
}

/// Parameters, vocabulary and component handles sharing one store.
#[derive(Debug, Clone)]
pub struct ModelSet {
    pub config: ModelConfig,
    pub integration: Integration,
    pub vocab: Vocab,
    pub store: ParamStore,
    pub skeleton: Option<SkeletonGenerator>,
    pub response: Option<ResponseGenerator>,
    pub critic: Option<Critic>,
    /// Training stages completed so far, oldest first.
    pub stages: Vec<String>,
}

impl ModelSet {
    /// Builds freshly initialized components. Parameter names are prefixed
    /// `ske.`, `res.` and `critic.`.
    pub fn new(
        config: ModelConfig,
        vocab: Vocab,
        integration: Integration,
        components: Components,
        seed: u64,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        if integration == Integration::Joint && !(components.skeleton && components.response) {
            return Err(ModelError::Config("joint integration needs both generators".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let v = vocab.len();
        let skeleton = components
            .skeleton
            .then(|| SkeletonGenerator::new(&mut store, &mut rng, "ske", v, config.skeleton()))
            .transpose()?;
        let response = components
            .response
            .then(|| {
                ResponseGenerator::new(
                    &mut store,
                    &mut rng,
                    "res",
                    v,
                    config.response(),
                    integration == Integration::Pipeline,
                )
            })
            .transpose()?;
        if let (Some(s), Some(r), Integration::Joint) = (&skeleton, &response, integration) {
            if s.slot_dim() != r.slot_dim() {
                return Err(ModelError::Config(format!(
                    "skeleton slots ({}) must match response slots ({}) under joint integration",
                    s.slot_dim(),
                    r.slot_dim()
                )));
            }
        }
        let critic = components
            .critic
            .then(|| Critic::new(&mut store, &mut rng, "critic", v, config.emb, config.hidden, config.dropout))
            .transpose()?;
        Ok(Self { config, integration, vocab, store, skeleton, response, critic, stages: Vec::new() })
    }

    pub fn components(&self) -> Components {
        Components {
            skeleton: self.skeleton.is_some(),
            response: self.response.is_some(),
            critic: self.critic.is_some(),
        }
    }

    pub fn has_stage(&self, stage: &str) -> bool {
        self.stages.iter().any(|s| s == stage)
    }

    pub fn mark_stage(&mut self, stage: &str) {
        if !self.has_stage(stage) {
            self.stages.push(stage.to_owned());
        }
    }

    fn skeleton_gen(&self) -> Result<&SkeletonGenerator, ModelError> {
        self.skeleton.as_ref().ok_or_else(|| ModelError::Config("model set has no skeleton generator".into()))
    }

    fn response_gen(&self) -> Result<&ResponseGenerator, ModelError> {
        self.response.as_ref().ok_or_else(|| ModelError::Config("model set has no response generator".into()))
    }

    /// Keep probabilities, thresholded labels and the skeleton for one
    /// retrieved pair. Without a skeleton generator every token is kept.
    pub fn skeleton_for(
        &self,
        q: &[String],
        rq: &[String],
        rr: &[String],
        threshold: f64,
    ) -> Result<SkeletonOutput, ModelError> {
        let Some(ske) = &self.skeleton else {
            return Ok(SkeletonOutput { probs: vec![1.0; rr.len()], labels: vec![1; rr.len()], skeleton: rr.to_vec() });
        };
        let input = SkeletonInput::new(&self.vocab, q, rq, rr);
        let p = ske.mask_probs(&self.store, &input)?;
        let labels = threshold_mask(&p, threshold);
        let skeleton = mask_tokens(rr, &labels).expect("one label per token");
        Ok(SkeletonOutput { probs: p, labels, skeleton })
    }

    /// Encodes the query together with the memory for the given retrieved pairs.
    fn pools(
        &self,
        tape: &mut Tape<'_>,
        q: &[usize],
        items: &[(SkeletonInput, Vec<usize>)],
    ) -> Result<Pools, ModelError> {
        let res = self.response_gen()?;
        match self.integration {
            Integration::Pipeline => {
                let skels: Vec<Vec<usize>> = items.iter().map(|(_, s)| s.clone()).collect();
                res.encode(tape, q, SkeletonMemory::Tokens(&skels))
            }
            Integration::Joint => {
                let ske = self.skeleton_gen()?;
                let mut slots: Vec<Var> = Vec::new();
                for (input, _) in items {
                    slots.extend(ske.forward(tape, input)?.slots);
                }
                res.encode(tape, q, SkeletonMemory::Slots(&slots))
            }
        }
    }

    fn decode_one(
        &self,
        q: &[usize],
        items: &[(SkeletonInput, Vec<usize>)],
        opts: &DecodeOptions,
        inverse: Option<&ModelSet>,
    ) -> Result<Hypothesis, ModelError> {
        let res = self.response_gen()?;
        let mut tape = Tape::new(&self.store);
        let pools = self.pools(&mut tape, q, items)?;
        let best = match (opts.strategy, inverse) {
            (Strategy::Greedy, None) => greedy(res, &mut tape, &pools, opts.max_len)?,
            (strategy, inverse) => {
                let width = match strategy {
                    Strategy::Greedy => 1,
                    Strategy::Beam => opts.width,
                };
                let nbest = beam_search(res, &mut tape, &pools, width, opts.max_len)?;
                let ranked = match inverse {
                    Some(inv) => mmi_rerank(nbest, |h| inv.inverse_score(&h.tokens, q))?,
                    None => nbest,
                };
                ranked.into_iter().next().unwrap_or(Hypothesis {
                    tokens: vec![],
                    log_prob: 0.0,
                    finished: false,
                    gate_mean: 0.0,
                })
            }
        };
        Ok(best)
    }

    /// log P(q | candidate) under an inverse (response-to-query) model, which
    /// sees a lone `<blank>` as its skeleton.
    pub fn inverse_score(&self, candidate: &[usize], q: &[usize]) -> Result<f64, ModelError> {
        if candidate.is_empty() {
            return Ok(f64::NEG_INFINITY);
        }
        let res = self.response_gen()?;
        let mut tape = Tape::new(&self.store);
        let pools = res.encode(&mut tape, candidate, SkeletonMemory::Tokens(&[vec![BLANK_ID]]))?;
        score_target(res, &mut tape, &pools, q)
    }

    /// Generates a response for `q` from its retrieved pairs.
    pub fn respond(
        &self,
        q: &[String],
        retrieved: &[(TokenSeq, TokenSeq)],
        opts: &DecodeOptions,
        inverse: Option<&ModelSet>,
    ) -> Result<Generation, ModelError> {
        if retrieved.is_empty() {
            return Err(ModelError::EmptySequence("retrieved pairs"));
        }
        let qi = self.vocab.encode(q);
        let mut skeletons = Vec::with_capacity(retrieved.len());
        let mut items = Vec::with_capacity(retrieved.len());
        for (rq, rr) in retrieved {
            let out = self.skeleton_for(q, rq, rr, opts.threshold)?;
            items.push((SkeletonInput::new(&self.vocab, q, rq, rr), self.vocab.encode(&out.skeleton)));
            skeletons.push(out.skeleton);
        }
        let (chosen, hyp) = match opts.usage {
            Usage::Multiple => (0, self.decode_one(&qi, &items, opts, inverse)?),
            Usage::Single => {
                let mut best: Option<(usize, Hypothesis)> = None;
                for (i, item) in items.iter().enumerate() {
                    let h = self.decode_one(&qi, std::slice::from_ref(item), opts, inverse)?;
                    // strict comparison: earlier retrieval rank wins ties
                    if best.as_ref().is_none_or(|(_, b)| h.normalized() > b.normalized()) {
                        best = Some((i, h));
                    }
                }
                best.expect("retrieved is non-empty")
            }
        };
        Ok(Generation {
            response: self.vocab.decode(&hyp.tokens),
            log_prob: hyp.log_prob,
            normalized: hyp.normalized(),
            gate_mean: hyp.gate_mean,
            skeletons,
            chosen,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonOutput {
    pub probs: Vec<f64>,
    pub labels: Vec<u8>,
    pub skeleton: TokenSeq,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Greedy,
    Beam,
}

/// How the retrieval set is used at generation time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Usage {
    /// One response per retrieved pair; the best length-normalized one wins.
    Single,
    /// All skeletons share one memory and a single decode.
    Multiple,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOptions {
    pub strategy: Strategy,
    pub width: usize,
    pub max_len: usize,
    pub usage: Usage,
    /// keep threshold for skeleton tokens
    pub threshold: f64,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self { strategy: Strategy::Greedy, width: 5, max_len: 30, usage: Usage::Single, threshold: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub response: TokenSeq,
    pub log_prob: f64,
    pub normalized: f64,
    pub gate_mean: f64,
    /// one skeleton per retrieved pair, in retrieval order
    pub skeletons: Vec<TokenSeq>,
    /// index of the retrieved pair behind the response (0 in Multiple mode)
    pub chosen: usize,
}
