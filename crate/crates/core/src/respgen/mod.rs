//! Response generator: biLSTM encoders over the query and the skeleton(s), a
//! two-memory attentive LSTM decoder, and the gated output fusion.

mod decode;

pub use decode::{beam_search, greedy, mmi_rerank, sample, score_target, Hypothesis};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::ModelError;
use crate::layers::{bilinear_attend, BiEncoder, Linear, LstmCell, LstmState, RecurrentCell, INIT_BOUND};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResponseConfig {
    pub emb: usize,
    pub hidden: usize,
    /// layers of each encoder and of the decoder
    pub layers: usize,
    pub dropout: f64,
}

/// Where the skeleton memory comes from.
#[derive(Debug, Clone, Copy)]
pub enum SkeletonMemory<'a> {
    /// Skeleton token ids, encoded by the generator's own skeleton encoder
    /// and concatenated slot-wise.
    Tokens(&'a [Vec<usize>]),
    /// Precomputed slots (the skeleton generator's states under joint training).
    Slots(&'a [Var]),
}

#[derive(Debug, Clone)]
pub struct DecoderState {
    pub layers: Vec<LstmState>,
}

impl DecoderState {
    pub fn top(&self) -> Var {
        self.layers.last().expect("decoder has layers").h
    }
}

/// Encoded query and skeleton memories plus the decoder's initial state.
#[derive(Debug, Clone)]
pub struct Pools {
    /// `(|q|, D)` query slots
    pub query: Var,
    /// `(|t|, D)` skeleton slots
    pub skeleton: Var,
    pub init: DecoderState,
}

/// One decoder transition.
#[derive(Debug, Clone)]
pub struct Step {
    pub log_probs: Var,
    pub gate: Var,
    pub state: DecoderState,
    pub fused: Var,
    pub query_context: Var,
    pub skeleton_context: Var,
}

#[derive(Debug, Clone)]
pub struct ResponseGenerator {
    cfg: ResponseConfig,
    vocab_size: usize,
    embedding: ParamId,
    query_enc: BiEncoder<LstmCell>,
    skeleton_enc: Option<BiEncoder<LstmCell>>,
    bridge: Vec<Linear>,
    decoder: Vec<LstmCell>,
    w_q: ParamId,
    w_t: ParamId,
    fuse: Linear,
    gate: Linear,
    out: Linear,
}

impl ResponseGenerator {
    /// Without `skeleton_encoder` the skeleton memory must be supplied as slots.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
        vocab_size: usize,
        cfg: ResponseConfig,
        skeleton_encoder: bool,
    ) -> Result<Self, ModelError> {
        if cfg.layers == 0 || cfg.hidden == 0 || cfg.emb == 0 {
            return Err(ModelError::Config("response generator sizes must be positive".into()));
        }
        let (h, l) = (cfg.hidden, cfg.layers);
        let d = 2 * h;
        let embedding = store.uniform(format!("{prefix}.emb"), &[vocab_size, cfg.emb], INIT_BOUND, rng)?;
        let query_enc = BiEncoder::lstm(store, rng, &format!("{prefix}.qenc"), cfg.emb, h, l, cfg.dropout)?;
        let skeleton_enc = if skeleton_encoder {
            Some(BiEncoder::lstm(store, rng, &format!("{prefix}.tenc"), cfg.emb, h, l, cfg.dropout)?)
        } else {
            None
        };
        let bridge = (0..l)
            .map(|i| Linear::new(store, rng, &format!("{prefix}.bridge{i}"), d, h, true))
            .collect::<Result<_, _>>()?;
        let decoder = (0..l)
            .map(|i| LstmCell::new(store, rng, &format!("{prefix}.dec.l{i}"), if i == 0 { cfg.emb } else { h }, h))
            .collect::<Result<_, _>>()?;
        Ok(Self {
            cfg,
            vocab_size,
            embedding,
            query_enc,
            skeleton_enc,
            bridge,
            decoder,
            w_q: store.uniform(format!("{prefix}.att_q"), &[d, h], INIT_BOUND, rng)?,
            w_t: store.uniform(format!("{prefix}.att_t"), &[d, h], INIT_BOUND, rng)?,
            fuse: Linear::new(store, rng, &format!("{prefix}.fuse"), h + d, d, false)?,
            gate: Linear::new(store, rng, &format!("{prefix}.gate"), h + 2 * d, 1, true)?,
            out: Linear::new(store, rng, &format!("{prefix}.out"), d, vocab_size, true)?,
        })
    }

    pub fn config(&self) -> &ResponseConfig {
        &self.cfg
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    /// Dimension of every memory slot.
    pub fn slot_dim(&self) -> usize {
        2 * self.cfg.hidden
    }

    pub fn has_skeleton_encoder(&self) -> bool {
        self.skeleton_enc.is_some()
    }

    fn embed(&self, tape: &mut Tape<'_>, ids: &[usize]) -> Result<Vec<Var>, ModelError> {
        let table = tape.param(self.embedding);
        ids.iter()
            .map(|&i| {
                let e = tape.embedding(table, i)?;
                Ok(tape.dropout(e, self.cfg.dropout))
            })
            .collect()
    }

    pub fn encode(&self, tape: &mut Tape<'_>, q: &[usize], memory: SkeletonMemory<'_>) -> Result<Pools, ModelError> {
        if q.is_empty() {
            return Err(ModelError::EmptySequence("query"));
        }
        let xs = self.embed(tape, q)?;
        let qo = self.query_enc.encode(tape, &xs)?;
        let query = tape.stack(&qo.slots)?;

        let mut slots = Vec::new();
        match memory {
            SkeletonMemory::Tokens(skeletons) => {
                let enc = self
                    .skeleton_enc
                    .as_ref()
                    .ok_or_else(|| ModelError::Config("this generator takes skeleton slots, not tokens".into()))?;
                for t in skeletons {
                    let xs = self.embed(tape, t)?;
                    slots.extend(enc.encode(tape, &xs)?.slots);
                }
            }
            SkeletonMemory::Slots(s) => slots.extend_from_slice(s),
        }
        if slots.is_empty() {
            return Err(ModelError::EmptySequence("skeleton memory"));
        }
        let skeleton = tape.stack(&slots)?;
        let width = tape.value(skeleton).cols();
        if width != self.slot_dim() {
            return Err(ModelError::LengthMismatch {
                what: "skeleton slot width",
                expected: self.slot_dim(),
                got: width,
            });
        }

        let summary = tape.concat(&[qo.last_forward.h, qo.last_backward.h])?;
        let mut layers = Vec::with_capacity(self.bridge.len());
        for b in &self.bridge {
            let h = b.forward(tape, summary)?;
            let h = tape.tanh(h);
            let c = tape.constant(crate::autodiff::Tensor::zeros(&[self.cfg.hidden]));
            layers.push(LstmState { h, c });
        }
        Ok(Pools { query, skeleton, init: DecoderState { layers } })
    }

    /// Consumes `prev`, updates the decoder, then attends with the new top state.
    /// `gate_override` pins the fusion gate to a constant.
    pub fn step(
        &self,
        tape: &mut Tape<'_>,
        pools: &Pools,
        state: &DecoderState,
        prev: usize,
        gate_override: Option<f64>,
    ) -> Result<Step, ModelError> {
        let table = tape.param(self.embedding);
        let mut x = tape.embedding(table, prev)?;
        x = tape.dropout(x, self.cfg.dropout);
        let mut layers = Vec::with_capacity(self.decoder.len());
        for (l, (cell, s)) in self.decoder.iter().zip(&state.layers).enumerate() {
            if l > 0 {
                x = tape.dropout(x, self.cfg.dropout);
            }
            let ns = cell.step(tape, x, s)?;
            x = LstmCell::output(&ns);
            layers.push(ns);
        }
        let s = x;
        let (w_q, w_t) = (tape.param(self.w_q), tape.param(self.w_t));
        let c = bilinear_attend(tape, pools.query, s, w_q)?.context;
        let ct = bilinear_attend(tape, pools.skeleton, s, w_t)?.context;

        let gate = match gate_override {
            Some(g) => tape.scalar(g),
            None => {
                let gin = tape.concat(&[s, c, ct])?;
                let g = self.gate.forward(tape, gin)?;
                let g = tape.sigmoid(g);
                tape.pick(g, 0)?
            }
        };
        let sc = tape.concat(&[s, c])?;
        let fused = self.fuse.forward(tape, sc)?;
        let a = tape.mul_scalar(fused, gate)?;
        let keep = tape.one_minus(gate);
        let b = tape.mul_scalar(ct, keep)?;
        let y = tape.add(a, b)?;
        let y = tape.dropout(y, self.cfg.dropout);
        let logits = self.out.forward(tape, y)?;
        let log_probs = tape.log_softmax(logits, 0)?;
        Ok(Step { log_probs, gate, state: DecoderState { layers }, fused: y, query_context: c, skeleton_context: ct })
    }

    /// Teacher-forced pass over `target` followed by `<eos>`. Returns the
    /// log-probability of each gold token and the steps that produced them.
    pub fn teacher_force(
        &self,
        tape: &mut Tape<'_>,
        pools: &Pools,
        target: &[usize],
        gate_override: Option<f64>,
    ) -> Result<(Vec<Var>, Vec<Step>), ModelError> {
        use crate::text::{BOS_ID, EOS_ID};
        let mut state = pools.init.clone();
        let mut prev = BOS_ID;
        let mut lps = Vec::with_capacity(target.len() + 1);
        let mut steps = Vec::with_capacity(target.len() + 1);
        for &gold in target.iter().chain(std::iter::once(&EOS_ID)) {
            let st = self.step(tape, pools, &state, prev, gate_override)?;
            lps.push(tape.pick(st.log_probs, gold)?);
            state = st.state.clone();
            steps.push(st);
            prev = gold;
        }
        Ok((lps, steps))
    }
}
