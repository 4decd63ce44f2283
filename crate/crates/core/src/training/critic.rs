use rand::Rng;

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::ModelError;
use crate::layers::{BiEncoder, LstmCell, INIT_BOUND};
use crate::text::EOS_ID;

/// Comparative critic: scores candidate responses against a query with a
/// bilinear match between biLSTM sentence vectors.
#[derive(Debug, Clone)]
pub struct Critic {
    embedding: ParamId,
    encoder: BiEncoder<LstmCell>,
    match_w: ParamId,
}

/// Candidate order for [`Critic::log_probs`].
pub const GENERATED: usize = 0;
pub const RANDOM: usize = 1;
pub const GOLD: usize = 2;

impl Critic {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
        vocab_size: usize,
        emb: usize,
        hidden: usize,
        dropout: f64,
    ) -> Result<Self, ModelError> {
        let embedding = store.uniform(format!("{prefix}.emb"), &[vocab_size, emb], INIT_BOUND, rng)?;
        let encoder = BiEncoder::lstm(store, rng, &format!("{prefix}.enc"), emb, hidden, 1, dropout)?;
        let d = encoder.slot_dim();
        let match_w = store.uniform(format!("{prefix}.match"), &[d, d], INIT_BOUND, rng)?;
        Ok(Self { embedding, encoder, match_w })
    }

    pub fn match_matrix(&self) -> ParamId {
        self.match_w
    }

    /// Final forward state ⊕ final backward state. An empty sentence is read as `<eos>`.
    pub fn sentence(&self, tape: &mut Tape<'_>, ids: &[usize]) -> Result<Var, ModelError> {
        let ids = if ids.is_empty() { &[EOS_ID][..] } else { ids };
        let table = tape.param(self.embedding);
        let xs = ids.iter().map(|&i| tape.embedding(table, i)).collect::<Result<Vec<_>, _>>()?;
        let out = self.encoder.encode(tape, &xs)?;
        Ok(tape.concat(&[out.last_forward.h, out.last_backward.h])?)
    }

    /// Log-softmax over the bilinear scores of the three candidates
    /// (generated, random, gold).
    pub fn log_probs(&self, tape: &mut Tape<'_>, q: &[usize], candidates: [&[usize]; 3]) -> Result<Var, ModelError> {
        let hq = self.sentence(tape, q)?;
        let m = tape.param(self.match_w);
        let mhq = tape.matmul(m, hq)?;
        let mut scores = Vec::with_capacity(3);
        for c in candidates {
            let hx = self.sentence(tape, c)?;
            scores.push(tape.matmul(hx, mhq)?);
        }
        let scores = tape.concat(&scores)?;
        Ok(tape.log_softmax(scores, 0)?)
    }

    /// Reward of a generated response: its log-probability of being picked
    /// among {generated, random, gold}. Always ≤ 0.
    pub fn reward(
        &self,
        store: &ParamStore,
        q: &[usize],
        generated: &[usize],
        random: &[usize],
        gold: &[usize],
    ) -> Result<f64, ModelError> {
        let mut tape = Tape::new(store);
        let lp = self.log_probs(&mut tape, q, [generated, random, gold])?;
        Ok(tape.value(lp).data()[GENERATED])
    }

    /// Index of the candidate the critic picks as human-written.
    pub fn pick(&self, store: &ParamStore, q: &[usize], candidates: [&[usize]; 3]) -> Result<usize, ModelError> {
        let mut tape = Tape::new(store);
        let lp = self.log_probs(&mut tape, q, candidates)?;
        let d = tape.value(lp).data();
        Ok((0..3).fold(0, |b, i| if d[i] > d[b] { i } else { b }))
    }
}
