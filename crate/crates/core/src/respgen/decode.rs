use std::cmp::Ordering;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{DecoderState, Pools, ResponseGenerator};
use crate::autodiff::{Tape, Var};
use crate::error::ModelError;
use crate::text::{BOS_ID, EOS_ID};

/// A decoded response. `tokens` excludes `<eos>`; `finished` records whether
/// `<eos>` was emitted (and counted in `log_prob`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub finished: bool,
    pub gate_mean: f64,
}

impl Hypothesis {
    /// Number of emitted tokens including `<eos>`.
    pub fn emitted(&self) -> usize {
        self.tokens.len() + usize::from(self.finished)
    }

    /// Log-probability per emitted token; 0 for an empty hypothesis.
    pub fn normalized(&self) -> f64 {
        match self.emitted() {
            0 => 0.0,
            n => self.log_prob / n as f64,
        }
    }
}

fn argmax(xs: &[f64]) -> usize {
    // first maximum wins, so ties go to the smaller id
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Argmax decoding for at most `max_len` steps.
pub fn greedy(
    gen: &ResponseGenerator,
    tape: &mut Tape<'_>,
    pools: &Pools,
    max_len: usize,
) -> Result<Hypothesis, ModelError> {
    let mut h = Hypothesis { tokens: Vec::new(), log_prob: 0.0, finished: false, gate_mean: 0.0 };
    let mut state = pools.init.clone();
    let mut prev = BOS_ID;
    let mut gate_sum = 0.0;
    for _ in 0..max_len {
        let st = gen.step(tape, pools, &state, prev, None)?;
        let lp = tape.value(st.log_probs).data();
        let tok = argmax(lp);
        h.log_prob += lp[tok];
        gate_sum += tape.item(st.gate);
        if tok == EOS_ID {
            h.finished = true;
            break;
        }
        h.tokens.push(tok);
        state = st.state;
        prev = tok;
    }
    if h.emitted() > 0 {
        h.gate_mean = gate_sum / h.emitted() as f64;
    }
    Ok(h)
}

struct Live {
    tokens: Vec<usize>,
    log_prob: f64,
    gate_sum: f64,
    state: DecoderState,
}

fn retire(tokens: Vec<usize>, log_prob: f64, gate_sum: f64, finished: bool) -> Hypothesis {
    let mut h = Hypothesis { tokens, log_prob, finished, gate_mean: 0.0 };
    if h.emitted() > 0 {
        h.gate_mean = gate_sum / h.emitted() as f64;
    }
    h
}

/// Beam search keeping `width` live prefixes ranked by cumulative log-prob.
///
/// A prefix that emits `<eos>` is retired to the result pool; the search ends
/// when the pool holds `width` hypotheses, no prefix is live, or `max_len`
/// steps have run (live prefixes are then retired unfinished). Results are
/// sorted by length-normalized log-prob, descending.
pub fn beam_search(
    gen: &ResponseGenerator,
    tape: &mut Tape<'_>,
    pools: &Pools,
    width: usize,
    max_len: usize,
) -> Result<Vec<Hypothesis>, ModelError> {
    let width = width.max(1);
    let mut live = vec![Live { tokens: Vec::new(), log_prob: 0.0, gate_sum: 0.0, state: pools.init.clone() }];
    let mut pool: Vec<Hypothesis> = Vec::new();
    for _ in 0..max_len {
        if live.is_empty() || pool.len() >= width {
            break;
        }
        // (score, beam, token, gate) candidates
        let mut cands: Vec<(f64, usize, usize, f64)> = Vec::new();
        let mut next_states = Vec::with_capacity(live.len());
        for (b, l) in live.iter().enumerate() {
            let prev = l.tokens.last().copied().unwrap_or(BOS_ID);
            let st = gen.step(tape, pools, &l.state, prev, None)?;
            let lp = tape.value(st.log_probs).data();
            let mut order: Vec<usize> = (0..lp.len()).collect();
            let k = width.min(order.len());
            let by_score = |a: &usize, c: &usize| lp[*c].total_cmp(&lp[*a]).then(a.cmp(c));
            if k < order.len() {
                order.select_nth_unstable_by(k - 1, by_score);
                order.truncate(k);
            }
            let g = tape.item(st.gate);
            cands.extend(order.into_iter().map(|t| (l.log_prob + lp[t], b, t, g)));
            next_states.push(st.state);
        }
        cands.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
        cands.truncate(width);
        let mut next = Vec::with_capacity(width);
        for (score, b, tok, g) in cands {
            let parent = &live[b];
            let gate_sum = parent.gate_sum + g;
            if tok == EOS_ID {
                pool.push(retire(parent.tokens.clone(), score, gate_sum, true));
            } else {
                let mut tokens = parent.tokens.clone();
                tokens.push(tok);
                next.push(Live { tokens, log_prob: score, gate_sum, state: next_states[b].clone() });
            }
        }
        live = next;
    }
    if pool.len() < width {
        pool.extend(live.into_iter().map(|l| retire(l.tokens, l.log_prob, l.gate_sum, false)));
    }
    // stable: equal scores keep retirement order
    pool.sort_by(|a, b| b.normalized().partial_cmp(&a.normalized()).unwrap_or(Ordering::Equal));
    Ok(pool)
}

/// Samples a response token by token. Returns the tokens (without `<eos>`)
/// and the summed log-probability as a differentiable scalar.
pub fn sample<R: Rng + ?Sized>(
    gen: &ResponseGenerator,
    tape: &mut Tape<'_>,
    pools: &Pools,
    max_len: usize,
    rng: &mut R,
) -> Result<(Vec<usize>, Option<Var>), ModelError> {
    let mut state = pools.init.clone();
    let mut prev = BOS_ID;
    let mut tokens = Vec::new();
    let mut terms = Vec::new();
    for _ in 0..max_len {
        let st = gen.step(tape, pools, &state, prev, None)?;
        let u: f64 = rng.gen();
        let lp = tape.value(st.log_probs).data();
        let mut acc = 0.0;
        let mut tok = lp.len() - 1;
        for (i, &x) in lp.iter().enumerate() {
            acc += x.exp();
            if u < acc {
                tok = i;
                break;
            }
        }
        terms.push(tape.pick(st.log_probs, tok)?);
        if tok == EOS_ID {
            break;
        }
        tokens.push(tok);
        state = st.state;
        prev = tok;
    }
    let total = if terms.is_empty() { None } else { Some(tape.add_all(&terms)?) };
    Ok((tokens, total))
}

/// log P(target, `<eos>`) under teacher forcing.
pub fn score_target(
    gen: &ResponseGenerator,
    tape: &mut Tape<'_>,
    pools: &Pools,
    target: &[usize],
) -> Result<f64, ModelError> {
    let (lps, _) = gen.teacher_force(tape, pools, target, None)?;
    Ok(lps.iter().map(|&v| tape.item(v)).sum())
}

/// Reorders an N-best list by `score` (the inverse model's log P(q | candidate)),
/// highest first; equal scores keep their original order.
pub fn mmi_rerank<E, F>(nbest: Vec<Hypothesis>, mut score: F) -> Result<Vec<Hypothesis>, E>
where
    F: FnMut(&Hypothesis) -> Result<f64, E>,
{
    let mut scored = nbest.into_iter().map(|h| Ok((score(&h)?, h))).collect::<Result<Vec<_>, E>>()?;
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal));
    Ok(scored.into_iter().map(|(_, h)| h).collect())
}
