//! Learning procedures: skeleton and response MLE, joint multi-task training,
//! critic training, cascaded policy-gradient training, and checkpoints.

mod cascade;
mod checkpoint;
mod critic;

pub use cascade::{train_cascade, CascadeReport};
pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, CheckpointError, CheckpointMeta, MAGIC, VERSION,
};
pub use critic::{Critic, GENERATED, GOLD, RANDOM};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Adam, AutodiffError, Gradients, Tape, Var};
use crate::dataset::{DialoguePair, LabeledQuad};
use crate::error::ModelError;
use crate::model::{Integration, ModelSet};
use crate::respgen::{ResponseGenerator, SkeletonMemory};
use crate::skelgen::{SkeletonGenerator, SkeletonInput};
use crate::text::{Vocab, BLANK_ID};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{0}")]
    Precondition(String),
    #[error("{0}")]
    Data(String),
}

impl From<AutodiffError> for TrainError {
    fn from(e: AutodiffError) -> Self {
        TrainError::Model(e.into())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    SkeMle,
    ResMle,
    Joint,
    Critic,
    Cascade,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::SkeMle => "ske_mle",
            Mode::ResMle => "res_mle",
            Mode::Joint => "joint",
            Mode::Critic => "critic",
            Mode::Cascade => "cascade",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    /// weight of the skeleton loss in joint training
    pub eta: f64,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    /// decay of the reward moving average used as the policy-gradient baseline
    pub baseline_decay: f64,
    pub clip_norm: f64,
    /// maximum sampled response length during cascade training
    pub max_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Joint,
            eta: 1.0,
            lr: 1e-3,
            batch: 16,
            epochs: 10,
            seed: 7,
            baseline_decay: 0.9,
            clip_norm: 5.0,
            max_len: 30,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Precondition(format!("invalid training config: {m}")));
        if self.eta < 0.0 || !self.eta.is_finite() {
            return bad("eta must be ≥ 0");
        }
        if self.batch == 0 {
            return bad("batch must be ≥ 1");
        }
        if self.lr < 0.0 || !self.lr.is_finite() {
            return bad("lr must be ≥ 0");
        }
        if !(0.0..=1.0).contains(&self.baseline_decay) {
            return bad("baseline_decay must lie in [0, 1]");
        }
        if self.clip_norm <= 0.0 {
            return bad("clip_norm must be positive");
        }
        Ok(())
    }
}

/// One record of the append-only training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub mode: Mode,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reward: Option<f64>,
    pub lr: f64,
}

/// A training record mapped to vocabulary ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub q: Vec<usize>,
    pub r: Vec<usize>,
    pub skeleton_input: SkeletonInput,
    /// proxy keep labels over the retrieved response
    pub labels: Vec<u8>,
    /// response-generator memory: the proxy skeleton's ids
    pub skeleton: Vec<usize>,
}

impl Example {
    pub fn from_quad(vocab: &Vocab, lq: &LabeledQuad) -> Result<Self, TrainError> {
        let quad = &lq.quad;
        if lq.m.len() != quad.rr.len() {
            return Err(TrainError::Data(format!(
                "label count {} does not match retrieved response length {}",
                lq.m.len(),
                quad.rr.len()
            )));
        }
        let skeleton_input = SkeletonInput::new(vocab, &quad.q, &quad.rq, &quad.rr);
        let skeleton =
            skeleton_input.rr.iter().zip(&lq.m).map(|(&id, &m)| if m == 1 { id } else { BLANK_ID }).collect();
        Ok(Self { q: vocab.encode(&quad.q), r: vocab.encode(&quad.r), skeleton_input, labels: lq.m.clone(), skeleton })
    }

    /// Response-to-query example for the inverse model: the response is the
    /// input and the skeleton is a lone `<blank>`.
    pub fn inverse(vocab: &Vocab, pair: &DialoguePair) -> Self {
        Self {
            q: vocab.encode(&pair.response),
            r: vocab.encode(&pair.query),
            skeleton_input: SkeletonInput { insert: vec![], delete: vec![], rr: vec![] },
            labels: vec![],
            skeleton: vec![BLANK_ID],
        }
    }
}

/// Summed negative log-likelihood and the number of tokens it covers.
#[derive(Debug, Clone, Copy)]
pub struct Nll {
    pub sum: Var,
    pub tokens: usize,
}

fn mean(tape: &mut Tape<'_>, parts: &[Nll]) -> Result<Var, TrainError> {
    let sums: Vec<Var> = parts.iter().map(|p| p.sum).collect();
    let n: usize = parts.iter().map(|p| p.tokens).sum();
    if n == 0 {
        return Err(TrainError::Data("batch has no tokens".into()));
    }
    let total = tape.add_all(&sums)?;
    Ok(tape.affine(total, 1.0 / n as f64, 0.0))
}

pub fn skeleton_nll(tape: &mut Tape<'_>, ske: &SkeletonGenerator, ex: &Example) -> Result<(Nll, Vec<Var>), TrainError> {
    let pass = ske.forward(tape, &ex.skeleton_input)?;
    let lp = ske.label_log_prob(tape, &pass, &ex.labels)?;
    Ok((Nll { sum: tape.neg(lp), tokens: ex.labels.len() }, pass.slots))
}

pub fn response_nll(
    tape: &mut Tape<'_>,
    res: &ResponseGenerator,
    ex: &Example,
    memory: SkeletonMemory<'_>,
) -> Result<Nll, TrainError> {
    let pools = res.encode(tape, &ex.q, memory)?;
    let (lps, _) = res.teacher_force(tape, &pools, &ex.r, None)?;
    let total = tape.add_all(&lps)?;
    Ok(Nll { sum: tape.neg(total), tokens: lps.len() })
}

/// Mean per-token skeleton-label NLL over a batch.
pub fn skeleton_loss(tape: &mut Tape<'_>, ske: &SkeletonGenerator, batch: &[&Example]) -> Result<Var, TrainError> {
    let parts = batch.iter().map(|ex| Ok(skeleton_nll(tape, ske, ex)?.0)).collect::<Result<Vec<_>, TrainError>>()?;
    mean(tape, &parts)
}

/// Mean per-token response NLL over a batch, conditioned on each example's proxy skeleton.
pub fn response_loss(tape: &mut Tape<'_>, res: &ResponseGenerator, batch: &[&Example]) -> Result<Var, TrainError> {
    let parts = batch
        .iter()
        .map(|ex| response_nll(tape, res, ex, SkeletonMemory::Tokens(std::slice::from_ref(&ex.skeleton))))
        .collect::<Result<Vec<_>, _>>()?;
    mean(tape, &parts)
}

#[derive(Debug, Clone, Copy)]
pub struct JointLoss {
    pub total: Var,
    pub skeleton: Var,
    pub response: Var,
}

/// Response loss over the skeleton generator's states plus `eta` times the skeleton loss.
pub fn joint_loss(
    tape: &mut Tape<'_>,
    ske: &SkeletonGenerator,
    res: &ResponseGenerator,
    batch: &[&Example],
    eta: f64,
) -> Result<JointLoss, TrainError> {
    let mut ske_parts = Vec::with_capacity(batch.len());
    let mut res_parts = Vec::with_capacity(batch.len());
    for ex in batch {
        let (nll, slots) = skeleton_nll(tape, ske, ex)?;
        ske_parts.push(nll);
        res_parts.push(response_nll(tape, res, ex, SkeletonMemory::Slots(&slots))?);
    }
    let skeleton = mean(tape, &ske_parts)?;
    let response = mean(tape, &res_parts)?;
    let weighted = tape.affine(skeleton, eta, 0.0);
    let total = tape.add(response, weighted)?;
    Ok(JointLoss { total, skeleton, response })
}

fn check_mode(models: &ModelSet, mode: Mode) -> Result<(), TrainError> {
    let c = models.components();
    let ok = match mode {
        Mode::SkeMle => c.skeleton,
        Mode::ResMle => c.response && models.integration == Integration::Pipeline,
        Mode::Joint => c.skeleton && c.response && models.integration == Integration::Joint,
        Mode::Critic => c.critic,
        Mode::Cascade => c.skeleton && c.response && c.critic && models.integration == Integration::Pipeline,
    };
    if ok {
        Ok(())
    } else {
        Err(TrainError::Precondition(format!("model set cannot be trained in {} mode", mode.as_str())))
    }
}

/// Computes one batch loss and its gradients.
fn batch_grads(
    models: &ModelSet,
    mode: Mode,
    batch: &[&Example],
    eta: f64,
    dropout_seed: u64,
) -> Result<(f64, Gradients), TrainError> {
    let mut tape = Tape::training(&models.store, ChaCha8Rng::seed_from_u64(dropout_seed));
    let loss = match mode {
        Mode::SkeMle => skeleton_loss(&mut tape, models.skeleton.as_ref().expect("checked"), batch)?,
        Mode::ResMle => response_loss(&mut tape, models.response.as_ref().expect("checked"), batch)?,
        Mode::Joint => {
            let (s, r) = (models.skeleton.as_ref().expect("checked"), models.response.as_ref().expect("checked"));
            joint_loss(&mut tape, s, r, batch, eta)?.total
        }
        _ => unreachable!("not an MLE mode"),
    };
    let value = tape.item(loss);
    let grads = tape.backward(loss)?.param_grads(&models.store);
    Ok((value, grads))
}

/// Epoch-level hook: `(epoch, models)`. Returning `true` stops training early.
pub type EpochHook<'a> = dyn FnMut(usize, &ModelSet) -> bool + 'a;

/// Maximum-likelihood training in `ske_mle`, `res_mle` or `joint` mode.
/// Returns the per-step losses.
pub fn train_mle(
    models: &mut ModelSet,
    examples: &[Example],
    cfg: &TrainConfig,
    log: &mut dyn FnMut(&StepLog),
    on_epoch: Option<&mut EpochHook<'_>>,
) -> Result<Vec<f64>, TrainError> {
    cfg.validate()?;
    check_mode(models, cfg.mode)?;
    if !matches!(cfg.mode, Mode::SkeMle | Mode::ResMle | Mode::Joint) {
        return Err(TrainError::Precondition(format!("{} is not a likelihood mode", cfg.mode.as_str())));
    }
    if examples.is_empty() {
        return Err(TrainError::Data("no training examples".into()));
    }
    let mut on_epoch = on_epoch;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(&models.store, cfg.lr);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut losses = Vec::new();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &examples[i]).collect();
            let (loss, mut grads) = batch_grads(models, cfg.mode, &batch, cfg.eta, rng.gen())?;
            grads.clip_global_norm(cfg.clip_norm);
            opt.step(&mut models.store, &grads)?;
            losses.push(loss);
            log(&StepLog { step: losses.len(), mode: cfg.mode, loss: Some(loss), reward: None, lr: cfg.lr });
        }
        if let Some(hook) = on_epoch.as_mut() {
            if hook(epoch + 1, models) {
                break;
            }
        }
    }
    models.mark_stage(cfg.mode.as_str());
    Ok(losses)
}

/// Teacher-forced response-token accuracy and thresholded skeleton-label accuracy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitReport {
    pub response_accuracy: f64,
    pub skeleton_accuracy: f64,
}

pub fn fit_report(models: &ModelSet, examples: &[Example]) -> Result<FitReport, TrainError> {
    let (mut r_ok, mut r_n, mut s_ok, mut s_n) = (0usize, 0usize, 0usize, 0usize);
    for ex in examples {
        let mut tape = Tape::new(&models.store);
        let mut slots = None;
        if let Some(ske) = &models.skeleton {
            if !ex.labels.is_empty() {
                let pass = ske.forward(&mut tape, &ex.skeleton_input)?;
                for (p, &m) in crate::skelgen::probs(&tape, &pass).iter().zip(&ex.labels) {
                    s_ok += usize::from(u8::from(*p >= 0.5) == m);
                    s_n += 1;
                }
                slots = Some(pass.slots);
            }
        }
        if let Some(res) = &models.response {
            let skel = [ex.skeleton.clone()];
            let memory = match (&slots, models.integration) {
                (Some(s), Integration::Joint) => SkeletonMemory::Slots(s),
                _ => SkeletonMemory::Tokens(&skel),
            };
            let pools = res.encode(&mut tape, &ex.q, memory)?;
            let (_, steps) = res.teacher_force(&mut tape, &pools, &ex.r, None)?;
            let golds = ex.r.iter().copied().chain(std::iter::once(crate::text::EOS_ID));
            for (st, gold) in steps.iter().zip(golds) {
                let lp = tape.value(st.log_probs).data();
                let best = (0..lp.len()).fold(0, |b, i| if lp[i] > lp[b] { i } else { b });
                r_ok += usize::from(best == gold);
                r_n += 1;
            }
        }
    }
    let frac = |a: usize, n: usize| if n == 0 { 0.0 } else { a as f64 / n as f64 };
    Ok(FitReport { response_accuracy: frac(r_ok, r_n), skeleton_accuracy: frac(s_ok, s_n) })
}

/// Critic training data: the query, a generated response and the gold response.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticExample {
    pub q: Vec<usize>,
    pub generated: Vec<usize>,
    pub gold: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CriticReport {
    pub losses: Vec<f64>,
    /// fraction of held-out examples where the critic picks the gold response
    pub heldout_accuracy: f64,
    pub heldout_size: usize,
}

/// Index of a gold response from an example other than `i`.
fn other_index<R: Rng + ?Sized>(rng: &mut R, n: usize, i: usize) -> usize {
    let j = rng.gen_range(0..n - 1);
    if j >= i {
        j + 1
    } else {
        j
    }
}

/// Trains the critic to pick the gold response among (generated, random, gold).
/// The last tenth of `data` is held out for the reported pick accuracy.
pub fn train_critic(
    models: &mut ModelSet,
    data: &[CriticExample],
    cfg: &TrainConfig,
    log: &mut dyn FnMut(&StepLog),
) -> Result<CriticReport, TrainError> {
    cfg.validate()?;
    check_mode(models, Mode::Critic)?;
    if data.len() < 2 {
        return Err(TrainError::Data("critic training needs at least two examples".into()));
    }
    let heldout_size = data.len() / 10;
    let train_n = data.len() - heldout_size;
    let mut opt = Adam::new(&models.store, cfg.lr);
    let mut losses = Vec::new();
    let mut order: Vec<usize> = (0..train_n).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64));
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch) {
            let critic = models.critic.as_ref().expect("checked");
            let mut tape = Tape::training(&models.store, ChaCha8Rng::seed_from_u64(rng.gen()));
            let mut terms = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let ex = &data[i];
                let random = &data[other_index(&mut rng, data.len(), i)].gold;
                let lp = critic.log_probs(&mut tape, &ex.q, [&ex.generated, random, &ex.gold])?;
                terms.push(tape.pick(lp, GOLD)?);
            }
            let total = tape.add_all(&terms)?;
            let loss = tape.affine(total, -1.0 / chunk.len() as f64, 0.0);
            let value = tape.item(loss);
            let mut grads = tape.backward(loss)?.param_grads(&models.store);
            drop(tape);
            grads.clip_global_norm(cfg.clip_norm);
            opt.step(&mut models.store, &grads)?;
            losses.push(value);
            log(&StepLog { step: losses.len(), mode: Mode::Critic, loss: Some(value), reward: None, lr: cfg.lr });
        }
    }
    let (eval_lo, eval_n) = if heldout_size > 0 { (train_n, heldout_size) } else { (0, data.len()) };
    let critic = models.critic.as_ref().expect("checked");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut correct = 0;
    for i in eval_lo..eval_lo + eval_n {
        let ex = &data[i];
        let random = &data[other_index(&mut rng, data.len(), i)].gold;
        correct += usize::from(critic.pick(&models.store, &ex.q, [&ex.generated, random, &ex.gold])? == GOLD);
    }
    models.mark_stage(Mode::Critic.as_str());
    Ok(CriticReport { losses, heldout_accuracy: correct as f64 / eval_n as f64, heldout_size })
}
