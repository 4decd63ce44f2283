use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{check_mode, other_index, Example, Mode, StepLog, TrainConfig, TrainError};
use crate::autodiff::{Adam, Tape};
use crate::model::ModelSet;
use crate::respgen::{sample, SkeletonMemory};
use crate::skelgen::{decide_mask, probs, MaskMode};
use crate::text::BLANK_ID;

#[derive(Debug, Clone, PartialEq)]
pub struct CascadeReport {
    /// mean reward of each update step
    pub step_rewards: Vec<f64>,
    /// mean reward of each epoch
    pub epoch_rewards: Vec<f64>,
}

/// Policy-gradient training of both generators against a frozen critic.
///
/// Each example samples keep/mask labels, then a response conditioned on the
/// sampled skeleton. The critic's reward minus a moving-average baseline
/// scales the summed log-probability of both samples. The baseline starts
/// at the first observed reward.
pub fn train_cascade(
    models: &mut ModelSet,
    examples: &[Example],
    cfg: &TrainConfig,
    log: &mut dyn FnMut(&StepLog),
) -> Result<CascadeReport, TrainError> {
    cfg.validate()?;
    check_mode(models, Mode::Cascade)?;
    for (stage, what) in [("ske_mle", "skeleton generator"), ("res_mle", "response generator"), ("critic", "critic")] {
        if !models.has_stage(stage) {
            return Err(TrainError::Precondition(format!(
                "cascade training needs a pretrained {what} (stage `{stage}` missing)"
            )));
        }
    }
    if examples.len() < 2 {
        return Err(TrainError::Data("cascade training needs at least two examples".into()));
    }
    models.store.set_trainable_prefix("critic.", false);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(&models.store, cfg.lr);
    let mut baseline: Option<f64> = None;
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut report = CascadeReport { step_rewards: Vec::new(), epoch_rewards: Vec::new() };
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut epoch_sum, mut epoch_n) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch) {
            let ske = models.skeleton.as_ref().expect("checked");
            let res = models.response.as_ref().expect("checked");
            let critic = models.critic.as_ref().expect("checked");
            let mut tape = Tape::training(&models.store, ChaCha8Rng::seed_from_u64(rng.gen()));
            let mut terms = Vec::with_capacity(chunk.len());
            let mut reward_sum = 0.0;
            for &i in chunk {
                let ex = &examples[i];
                let pass = ske.forward(&mut tape, &ex.skeleton_input)?;
                let (labels, _) = decide_mask(&probs(&tape, &pass), MaskMode::Sample, &mut rng);
                let skel_lp = ske.label_log_prob(&mut tape, &pass, &labels)?;
                let skeleton: Vec<usize> = ex
                    .skeleton_input
                    .rr
                    .iter()
                    .zip(&labels)
                    .map(|(&id, &m)| if m == 1 { id } else { BLANK_ID })
                    .collect();
                let pools = res.encode(&mut tape, &ex.q, SkeletonMemory::Tokens(std::slice::from_ref(&skeleton)))?;
                let (response, resp_lp) = sample(res, &mut tape, &pools, cfg.max_len, &mut rng)?;

                let random = &examples[other_index(&mut rng, examples.len(), i)].r;
                let reward = critic.reward(&models.store, &ex.q, &response, random, &ex.r)?;
                let b = *baseline.get_or_insert(reward);
                let advantage = reward - b;
                baseline = Some(cfg.baseline_decay * b + (1.0 - cfg.baseline_decay) * reward);
                reward_sum += reward;

                let lp = match resp_lp {
                    Some(r) => tape.add(skel_lp, r)?,
                    None => skel_lp,
                };
                terms.push(tape.affine(lp, -advantage, 0.0));
            }
            let total = tape.add_all(&terms)?;
            let loss = tape.affine(total, 1.0 / chunk.len() as f64, 0.0);
            let mut grads = tape.backward(loss)?.param_grads(&models.store);
            drop(tape);
            grads.clip_global_norm(cfg.clip_norm);
            opt.step(&mut models.store, &grads)?;

            let mean_reward = reward_sum / chunk.len() as f64;
            report.step_rewards.push(mean_reward);
            epoch_sum += reward_sum;
            epoch_n += chunk.len();
            log(&StepLog {
                step: report.step_rewards.len(),
                mode: Mode::Cascade,
                loss: None,
                reward: Some(mean_reward),
                lr: cfg.lr,
            });
        }
        report.epoch_rewards.push(epoch_sum / epoch_n as f64);
    }
    models.store.set_trainable_prefix("critic.", true);
    models.mark_stage(Mode::Cascade.as_str());
    Ok(report)
}
