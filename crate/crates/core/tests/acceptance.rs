//! End-to-end acceptance checks. Each test writes one PASS/FAIL line to
//! stderr (bypassing the harness capture) before asserting.

mod common;

use std::io::Write;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{oracle_proxy, synthetic_pairs, toks};
use s2r_core::autodiff::{grad_check, GradCheck, GradCheckReport, ParamStore, Tape, Tensor, Var};
use s2r_core::dataset::{
    build_quadruples, make_proxy_skeleton, DialoguePair, IndexSide, InvertedIndex, LabeledQuad, QuadOptions,
};
use s2r_core::eval::{dist_n, skeleton_metrics};
use s2r_core::layers::{
    additive_attend, bilinear_attend, run_cell, BiEncoder, GruCell, Linear, LstmCell, RecurrentCell,
};
use s2r_core::model::{Components, DecodeOptions, Integration, ModelConfig, ModelSet, Strategy};
use s2r_core::respgen::{beam_search, greedy, ResponseConfig, ResponseGenerator, SkeletonMemory};
use s2r_core::skelgen::SkeletonInput;
use s2r_core::synthetic;
use s2r_core::text::{jaccard, StopList, Vocab, BLANK_ID};
use s2r_core::training::{
    fit_report, joint_loss, load_checkpoint, response_loss, save_checkpoint, skeleton_loss, train_cascade,
    train_critic, train_mle, CriticExample, Example, Mode, TrainConfig, TrainError,
};
use s2r_core::ModelError;

fn verdict(id: u32, name: &str, pass: bool, detail: &str) {
    let status = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "acceptance {id} {name}: {status} ({detail})");
    assert!(pass, "acceptance {id} {name} failed: {detail}");
}

fn within(start: Instant, limit: Duration) -> (bool, String) {
    let t = start.elapsed();
    (t < limit, format!("{:.1}s of {}s", t.as_secs_f64(), limit.as_secs()))
}

// ---------------------------------------------------------------- gradients

/// Scalar loss `sum(v * probe)` with a fixed random probe of `v`'s shape.
fn probe_sum(tape: &mut Tape<'_>, v: Var, seed: u64) -> Result<Var, ModelError> {
    let shape = tape.value(v).shape().to_vec();
    let p = tape.constant(Tensor::uniform(&shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed)));
    let prod = tape.mul(v, p)?;
    Ok(tape.sum(prod))
}

fn inputs(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    name: &str,
    n: usize,
    dim: usize,
) -> Vec<s2r_core::autodiff::ParamId> {
    (0..n).map(|i| store.uniform(format!("{name}{i}"), &[dim], 1.0, rng).unwrap()).collect()
}

fn check(
    store: &mut ParamStore,
    dropout_seed: Option<u64>,
    f: impl FnMut(&mut Tape<'_>) -> Result<Var, ModelError>,
) -> GradCheckReport {
    let opts = GradCheck { dropout_seed, ..GradCheck::default() };
    grad_check(store, &opts, f).unwrap()
}

fn layer_reports() -> Vec<(&'static str, GradCheckReport)> {
    let mut out = Vec::new();
    let rng = &mut ChaCha8Rng::seed_from_u64(11);

    let mut s = ParamStore::new();
    let lin = Linear::new(&mut s, rng, "lin", 6, 5, true).unwrap();
    let x = s.uniform("x", &[6], 1.0, rng).unwrap();
    out.push((
        "linear",
        check(&mut s, None, |t| {
            let xv = t.param(x);
            let y = lin.forward(t, xv)?;
            let y = t.tanh(y);
            probe_sum(t, y, 1)
        }),
    ));

    let mut s = ParamStore::new();
    let gru = GruCell::new(&mut s, rng, "gru", 4, 6).unwrap();
    let xs = inputs(&mut s, rng, "x", 5, 4);
    out.push((
        "gru_cell",
        check(&mut s, None, |t| {
            let xv: Vec<Var> = xs.iter().map(|&i| t.param(i)).collect();
            let init = gru.zero_state(t);
            let states = run_cell(&gru, t, &xv, init)?;
            let all = t.concat(&states)?;
            probe_sum(t, all, 2)
        }),
    ));

    let mut s = ParamStore::new();
    let lstm = LstmCell::new(&mut s, rng, "lstm", 4, 6).unwrap();
    let xs = inputs(&mut s, rng, "x", 5, 4);
    out.push((
        "lstm_cell",
        check(&mut s, None, |t| {
            let xv: Vec<Var> = xs.iter().map(|&i| t.param(i)).collect();
            let init = lstm.zero_state(t);
            let states = run_cell(&lstm, t, &xv, init)?;
            let parts: Vec<Var> = states.iter().flat_map(|st| [st.h, st.c]).collect();
            let all = t.concat(&parts)?;
            probe_sum(t, all, 3)
        }),
    ));

    let mut s = ParamStore::new();
    let enc = BiEncoder::gru(&mut s, rng, "bigru", 4, 5, 2, 0.3).unwrap();
    let xs = inputs(&mut s, rng, "x", 6, 4);
    out.push((
        "bi_gru_2layer_dropout",
        check(&mut s, Some(5), |t| {
            let xv: Vec<Var> = xs.iter().map(|&i| t.param(i)).collect();
            let o = enc.encode(t, &xv)?;
            let mut parts = o.slots.clone();
            parts.extend([o.last_forward, o.last_backward]);
            let all = t.concat(&parts)?;
            probe_sum(t, all, 4)
        }),
    ));

    let mut s = ParamStore::new();
    let enc = BiEncoder::lstm(&mut s, rng, "bilstm", 4, 5, 2, 0.0).unwrap();
    let xs = inputs(&mut s, rng, "x", 6, 4);
    out.push((
        "bi_lstm_2layer",
        check(&mut s, None, |t| {
            let xv: Vec<Var> = xs.iter().map(|&i| t.param(i)).collect();
            let o = enc.encode(t, &xv)?;
            let mut parts = o.slots.clone();
            parts.extend([o.last_forward.h, o.last_forward.c, o.last_backward.h]);
            let all = t.concat(&parts)?;
            probe_sum(t, all, 5)
        }),
    ));

    let mut s = ParamStore::new();
    let slots = s.uniform("slots", &[7, 8], 1.0, rng).unwrap();
    let key = s.uniform("key", &[5], 1.0, rng).unwrap();
    let w = s.uniform("w", &[8, 5], 1.0, rng).unwrap();
    out.push((
        "bilinear_attention",
        check(&mut s, None, |t| {
            let (sv, kv, wv) = (t.param(slots), t.param(key), t.param(w));
            let a = bilinear_attend(t, sv, kv, wv)?;
            let both = t.concat(&[a.context, a.weights])?;
            probe_sum(t, both, 6)
        }),
    ));

    let mut s = ParamStore::new();
    let members = inputs(&mut s, rng, "m", 4, 5);
    let key = s.uniform("key", &[6], 1.0, rng).unwrap();
    let v = s.uniform("v", &[7], 1.0, rng).unwrap();
    let w = s.uniform("w", &[7, 11], 1.0, rng).unwrap();
    out.push((
        "additive_attention",
        check(&mut s, None, |t| {
            let mv: Vec<Var> = members.iter().map(|&i| t.param(i)).collect();
            let (kv, vv, wv) = (t.param(key), t.param(v), t.param(w));
            let a = additive_attend(t, &mv, kv, vv, wv)?;
            let both = t.concat(&[a.context, a.weights])?;
            probe_sum(t, both, 7)
        }),
    ));
    out
}

fn small_vocab(n: usize) -> Vocab {
    Vocab::from_tokens((0..n).map(|i| format!("w{i}")))
}

/// Random examples with sequences of at most 8 tokens over `vocab_len` ids.
fn random_examples(rng: &mut ChaCha8Rng, vocab_len: usize, n: usize) -> Vec<Example> {
    let word = |rng: &mut ChaCha8Rng| rng.gen_range(BLANK_ID + 1..vocab_len);
    let seq = |rng: &mut ChaCha8Rng, lo: usize, hi: usize| {
        let len = rng.gen_range(lo..=hi);
        (0..len).map(|_| word(rng)).collect::<Vec<_>>()
    };
    (0..n)
        .map(|i| {
            let rr = seq(rng, 3, 8);
            let labels: Vec<u8> = rr.iter().map(|_| rng.gen_range(0..2)).collect();
            let skeleton = rr.iter().zip(&labels).map(|(&t, &m)| if m == 1 { t } else { BLANK_ID }).collect();
            Example {
                q: seq(rng, 2, 8),
                r: seq(rng, 1, 8),
                // the second example has an empty deletion bag
                skeleton_input: SkeletonInput { insert: seq(rng, 1, 3), delete: seq(rng, usize::from(i != 1), 3), rr },
                labels,
                skeleton,
            }
        })
        .collect()
}

#[test]
fn a1_gradient_fidelity() {
    let start = Instant::now();
    let mut reports = layer_reports();

    let cfg = ModelConfig { emb: 6, hidden: 8, layers: 2, skeleton_layers: 1, attn: 8, dropout: 0.0 };
    let vocab = small_vocab(12);
    let exs = random_examples(&mut ChaCha8Rng::seed_from_u64(3), vocab.len(), 3);
    let batch: Vec<&Example> = exs.iter().collect();
    let sampled = GradCheck { max_coords_per_param: Some(24), ..GradCheck::default() };
    let both = Components { skeleton: true, response: true, critic: false };

    let mut pipe = ModelSet::new(cfg, vocab.clone(), Integration::Pipeline, both, 4).unwrap();
    let ske = pipe.skeleton.clone().unwrap();
    let res = pipe.response.clone().unwrap();
    reports.push(("skeleton_mle", grad_check(&mut pipe.store, &sampled, |t| skeleton_loss(t, &ske, &batch)).unwrap()));
    reports.push(("response_mle", grad_check(&mut pipe.store, &sampled, |t| response_loss(t, &res, &batch)).unwrap()));

    let mut joint = ModelSet::new(cfg, vocab, Integration::Joint, both, 5).unwrap();
    let ske = joint.skeleton.clone().unwrap();
    let res = joint.response.clone().unwrap();
    reports.push((
        "joint",
        grad_check(&mut joint.store, &sampled, |t| Ok::<_, TrainError>(joint_loss(t, &ske, &res, &batch, 0.7)?.total))
            .unwrap(),
    ));

    let worst = reports.iter().map(|(_, r)| r.max_rel_error).fold(0.0, f64::max);
    let failing: Vec<String> = reports
        .iter()
        .filter(|(_, r)| !(r.max_rel_error < 1e-3))
        .map(|(n, r)| format!("{n}: {:.2e} at {}[{}]", r.max_rel_error, r.worst_param, r.worst_coord))
        .collect();
    let coords: usize = reports.iter().map(|(_, r)| r.coords_checked).sum();
    let (fast, took) = within(start, Duration::from_secs(120));
    verdict(
        1,
        "gradient fidelity",
        failing.is_empty() && fast,
        &format!("{} checks, {coords} coords, worst rel err {worst:.2e}, {took}{}", reports.len(), {
            if failing.is_empty() {
                String::new()
            } else {
                format!("; failing {}", failing.join(", "))
            }
        }),
    );
}

// ---------------------------------------------------------------- proxy

#[test]
fn a2_proxy_oracle_equivalence() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let words: Vec<String> = (0..6).map(|i| format!("v{i}")).collect();
    let mut agree = 0;
    let mut first_miss = None;
    for case in 0..1000 {
        let seq = |rng: &mut ChaCha8Rng| {
            let n = rng.gen_range(0..=8);
            (0..n).map(|_| words.choose(rng).unwrap().clone()).collect::<Vec<_>>()
        };
        let r = seq(&mut rng);
        let rr = seq(&mut rng);
        let stop = StopList::new(words.iter().filter(|_| rng.gen_bool(0.3)).cloned());
        let got = make_proxy_skeleton(&r, &rr, &stop);
        if got == oracle_proxy(&r, &rr, &stop) {
            agree += 1;
        } else if first_miss.is_none() {
            first_miss = Some(format!("case {case}: r={r:?} rr={rr:?}"));
        }
    }
    verdict(
        2,
        "proxy-skeleton oracle",
        agree == 1000,
        &format!("{agree}/1000 agree{}", first_miss.map(|m| format!("; {m}")).unwrap_or_default()),
    );
}

// ---------------------------------------------------------------- data

#[test]
fn a3_data_pipeline_band() {
    let start = Instant::now();
    let mut pairs = synthetic_pairs(996, 31, true);
    // identical responses (similarity 1) and responses sharing nothing with
    // the corpus (similarity 0)
    for (q, r) in [
        ("plant one", "zeta eta theta iota"),
        ("plant two", "zeta eta theta iota"),
        ("plant three", "omega psi"),
        ("plant four", "kappa lambda mu"),
    ] {
        pairs.push(DialoguePair { id: pairs.len(), query: toks(q), response: toks(r) });
    }
    let idx = InvertedIndex::build(&pairs, IndexSide::Response).unwrap();
    let opts = QuadOptions::default();
    let quads = build_quadruples(&pairs, &idx, &opts);

    let outside = quads.iter().filter(|q| !(0.3..=0.7).contains(&jaccard(&q.r, &q.rr))).count();
    let plant_used = quads.iter().filter(|q| q.q[0] == "plant" || q.rq[0] == "plant").count();
    let identical = quads.iter().filter(|q| q.r == q.rr).count();
    let (fast, took) = within(start, Duration::from_secs(30));
    verdict(
        3,
        "data pipeline band",
        pairs.len() == 1000 && !quads.is_empty() && outside == 0 && plant_used == 0 && identical == 0 && fast,
        &format!(
            "{} quads from {} pairs, {outside} outside band, {plant_used} touching plants, {identical} identical, {took}",
            quads.len(),
            pairs.len()
        ),
    );
}

// ---------------------------------------------------------------- training

/// Labeled quadruples and their examples from the template corpus.
fn toy_examples(n_pairs: usize, seed: u64, max_quads: usize) -> (Vocab, Vec<LabeledQuad>, Vec<Example>) {
    let pairs = synthetic_pairs(n_pairs, seed, false);
    let idx = InvertedIndex::build(&pairs, IndexSide::Response).unwrap();
    let opts = QuadOptions { max_quads: Some(max_quads), seed, ..QuadOptions::default() };
    let stop = synthetic::stoplist();
    let labeled: Vec<LabeledQuad> =
        build_quadruples(&pairs, &idx, &opts).into_iter().map(|q| q.labeled(&stop)).collect();
    let vocab = Vocab::build(pairs.iter().flat_map(|p| [p.query.as_slice(), p.response.as_slice()]), 100, 1);
    let examples = labeled.iter().map(|lq| Example::from_quad(&vocab, lq).unwrap()).collect();
    (vocab, labeled, examples)
}

#[test]
fn a4_overfit_joint() {
    let start = Instant::now();
    let (vocab, _, examples) = toy_examples(300, 4, 64);
    let cfg = ModelConfig { emb: 32, hidden: 64, layers: 1, skeleton_layers: 1, attn: 32, dropout: 0.0 };
    let both = Components { skeleton: true, response: true, critic: false };
    let vocab_len = vocab.len();
    let mut models = ModelSet::new(cfg, vocab, Integration::Joint, both, 1).unwrap();
    let tc =
        TrainConfig { mode: Mode::Joint, eta: 1.0, lr: 0.01, batch: 8, epochs: 300, seed: 1, ..TrainConfig::default() };
    let mut reached = None;
    let mut last = None;
    let mut hook = |epoch: usize, m: &ModelSet| {
        if !epoch.is_multiple_of(5) {
            return false;
        }
        let fit = fit_report(m, &examples).unwrap();
        last = Some((epoch, fit));
        if fit.response_accuracy >= 0.95 && fit.skeleton_accuracy >= 0.95 {
            reached = Some(epoch);
            return true;
        }
        false
    };
    train_mle(&mut models, &examples, &tc, &mut |_| {}, Some(&mut hook)).unwrap();
    let fit = fit_report(&models, &examples).unwrap();
    let (fast, took) = within(start, Duration::from_secs(300));
    verdict(
        4,
        "overfit joint",
        examples.len() == 64 && vocab_len <= 50 && reached.is_some() && fast,
        &format!(
            "{} quads, vocab {vocab_len}, response acc {:.3}, skeleton acc {:.3}, stopped at epoch {}, {took}",
            examples.len(),
            fit.response_accuracy,
            fit.skeleton_accuracy,
            reached.map_or_else(|| format!("none (last check {:?})", last.map(|l| l.0)), |e| e.to_string())
        ),
    );
}

fn ema(xs: &[f64], decay: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(xs.len());
    let mut acc = None;
    for &x in xs {
        let v = match acc {
            None => x,
            Some(a) => decay * a + (1.0 - decay) * x,
        };
        acc = Some(v);
        out.push(v);
    }
    out
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

#[test]
fn a5_cascade_sanity() {
    let start = Instant::now();
    let (vocab, labeled, examples) = toy_examples(240, 5, 160);
    let cfg = ModelConfig { emb: 16, hidden: 16, layers: 1, skeleton_layers: 1, attn: 16, dropout: 0.0 };
    let all = Components { skeleton: true, response: true, critic: true };
    let mut models = ModelSet::new(cfg, vocab.clone(), Integration::Pipeline, all, 5).unwrap();
    let pre = |mode| TrainConfig { mode, lr: 0.01, batch: 8, epochs: 12, seed: 5, ..TrainConfig::default() };
    train_mle(&mut models, &examples, &pre(Mode::SkeMle), &mut |_| {}, None).unwrap();
    train_mle(&mut models, &examples, &pre(Mode::ResMle), &mut |_| {}, None).unwrap();

    let greedy_opts = DecodeOptions { max_len: 10, ..DecodeOptions::default() };
    let critic_data: Vec<CriticExample> = labeled
        .iter()
        .map(|lq| {
            let q = &lq.quad;
            let g = models.respond(&q.q, &[(q.rq.clone(), q.rr.clone())], &greedy_opts, None).unwrap();
            CriticExample { q: vocab.encode(&q.q), generated: vocab.encode(&g.response), gold: vocab.encode(&q.r) }
        })
        .collect();
    let critic_cfg =
        TrainConfig { mode: Mode::Critic, lr: 0.005, batch: 8, epochs: 3, seed: 5, ..TrainConfig::default() };
    train_critic(&mut models, &critic_data, &critic_cfg, &mut |_| {}).unwrap();

    // per-sample rewards of the trained critic, then of a zeroed one
    let critic = models.critic.clone().unwrap();
    let sample_rewards: Vec<f64> = critic_data
        .iter()
        .enumerate()
        .map(|(i, d)| {
            let random = &critic_data[(i + 1) % critic_data.len()].gold;
            critic.reward(&models.store, &d.q, &d.generated, random, &d.gold).unwrap()
        })
        .collect();
    let mut zeroed = models.clone();
    let ids: Vec<_> = zeroed.store.iter().filter(|(_, p)| p.name.starts_with("critic.")).map(|(id, _)| id).collect();
    for id in ids {
        zeroed.store.get_mut(id).tensor.data_mut().fill(0.0);
    }
    let uniform = (1.0f64 / 3.0).ln();
    let zero_dev = critic_data
        .iter()
        .enumerate()
        .map(|(i, d)| {
            let random = &critic_data[(i + 3) % critic_data.len()].gold;
            (critic.reward(&zeroed.store, &d.q, &d.generated, random, &d.gold).unwrap() - uniform).abs()
        })
        .fold(0.0, f64::max);
    let cas = TrainConfig {
        mode: Mode::Cascade,
        lr: 1e-3,
        batch: 8,
        epochs: 1,
        seed: 9,
        max_len: 10,
        ..TrainConfig::default()
    };
    let zero_run = train_cascade(&mut zeroed, &examples, &cas, &mut |_| {}).unwrap();
    let zero_dev = zero_run.step_rewards.iter().map(|r| (r - uniform).abs()).fold(zero_dev, f64::max);

    let cas = TrainConfig { epochs: 5, ..cas };
    let rep = train_cascade(&mut models, &examples, &cas, &mut |_| {}).unwrap();
    let steps = rep.step_rewards.len();
    let smooth = ema(&rep.step_rewards, 0.8);
    let fifth = (steps / 5).max(1);
    let (head, tail) = (mean(&smooth[..fifth]), mean(&smooth[steps - fifth..]));
    let max_reward = sample_rewards.iter().chain(&rep.step_rewards).copied().fold(f64::NEG_INFINITY, f64::max);

    let (fast, took) = within(start, Duration::from_secs(600));
    let a = max_reward <= 0.0;
    let b = zero_dev <= 1e-9;
    let c = tail >= head;
    verdict(
        5,
        "cascade sanity",
        a && b && c && fast,
        &format!(
            "(a) max reward {max_reward:.4}; (b) zero-critic max |r - ln(1/3)| {zero_dev:.1e}; \
             (c) smoothed reward first 20% {head:.4} -> last 20% {tail:.4} over {steps} steps; {took}"
        ),
    );
}

// ---------------------------------------------------------------- metrics

#[test]
fn a6_metric_exactness() {
    let d1 = dist_n(&[toks("a b"), toks("a c")], 1).unwrap();
    let d2 = dist_n(&[toks("a b c")], 2).unwrap();
    // tp 3, fp 1, fn 2, tn 1
    let pred = vec![vec![1, 0, 1, 1], vec![0, 0, 1]];
    let gold = vec![vec![1, 1, 0, 1], vec![0, 1, 1]];
    let m = skeleton_metrics(&pred, &gold).unwrap();
    let (p, r) = (3.0 / 4.0, 3.0 / 5.0);
    let f1 = 2.0 * p * r / (p + r);
    let acc = 4.0 / 7.0;
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-12;
    let ok = d1 == 0.75
        && d2 == 2.0 / 3.0
        && close(m.precision, p)
        && close(m.recall, r)
        && close(m.f1, f1)
        && close(m.accuracy, acc)
        && m.tokens == 7;
    verdict(
        6,
        "metric exactness",
        ok,
        &format!("dist1 {d1}, dist2 {d2}, P {} R {} F1 {} Acc {}", m.precision, m.recall, m.f1, m.accuracy),
    );
}

// ---------------------------------------------------------------- decoding

#[test]
fn a7_decoding_properties() {
    let mut identical = 0;
    let mut dominated = 0;
    let mut worst_gap = f64::INFINITY;
    let mut greedy_tokens = 0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let vocab_size = rng.gen_range(8..16);
        let cfg = ResponseConfig { emb: 5, hidden: rng.gen_range(3..8), layers: rng.gen_range(1..3), dropout: 0.0 };
        let gen = ResponseGenerator::new(&mut store, &mut rng, "res", vocab_size, cfg, true).unwrap();
        // sharpen the output layer so decodes are not all immediate stops
        let out = store.id("res.out.w").unwrap();
        for x in store.get_mut(out).tensor.data_mut() {
            *x *= 30.0;
        }
        let q: Vec<usize> = (0..rng.gen_range(1..6)).map(|_| rng.gen_range(BLANK_ID + 1..vocab_size)).collect();
        let t: Vec<usize> = (0..rng.gen_range(1..6)).map(|_| rng.gen_range(BLANK_ID..vocab_size)).collect();
        let mut tape = Tape::new(&store);
        let pools = gen.encode(&mut tape, &q, SkeletonMemory::Tokens(&[t])).unwrap();
        let max_len = 8;
        let g = greedy(&gen, &mut tape, &pools, max_len).unwrap();
        greedy_tokens += g.tokens.len();
        let b1 = beam_search(&gen, &mut tape, &pools, 1, max_len).unwrap();
        if b1.len() == 1 && b1[0].tokens == g.tokens && b1[0].finished == g.finished && b1[0].log_prob == g.log_prob {
            identical += 1;
        }
        let b4 = beam_search(&gen, &mut tape, &pools, 4, max_len).unwrap();
        let top = b4.iter().map(|h| h.log_prob).fold(f64::NEG_INFINITY, f64::max);
        worst_gap = worst_gap.min(top - g.log_prob);
        if top >= g.log_prob {
            dominated += 1;
        }
    }
    verdict(
        7,
        "decoding properties",
        identical == 100 && dominated == 100,
        &format!(
            "beam(1) == greedy on {identical}/100; beam(4) top log-prob >= greedy on {dominated}/100 \
             (min margin {worst_gap:.3e}); mean greedy length {:.1}",
            greedy_tokens as f64 / 100.0
        ),
    );
}

// ---------------------------------------------------------------- persistence

#[test]
fn a8_determinism_and_persistence() {
    let (vocab, labeled, examples) = toy_examples(120, 8, 48);
    let cfg = ModelConfig { emb: 12, hidden: 12, layers: 1, skeleton_layers: 1, attn: 12, dropout: 0.2 };
    let both = Components { skeleton: true, response: true, critic: false };
    let tc = TrainConfig { mode: Mode::Joint, lr: 0.01, batch: 4, epochs: 1, seed: 8, ..TrainConfig::default() };
    let run = || {
        let mut m = ModelSet::new(cfg, vocab.clone(), Integration::Joint, both, 8).unwrap();
        let losses = train_mle(&mut m, &examples, &tc, &mut |_| {}, None).unwrap();
        (m, losses)
    };
    let (mut models, a) = run();
    let (_, b) = run();
    let bits = |xs: &[f64]| xs.iter().take(10).map(|x| x.to_bits()).collect::<Vec<_>>();
    let same_losses = a.len() >= 10 && bits(&a) == bits(&b);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("joint.ckpt");
    save_checkpoint(&mut models, "joint", &path).unwrap();
    let (loaded, _) = load_checkpoint(&path).unwrap();
    let mut same_gen = 0;
    for (i, lq) in labeled.iter().take(20).enumerate() {
        let q = &lq.quad;
        let opts = DecodeOptions {
            strategy: if i % 2 == 0 { Strategy::Greedy } else { Strategy::Beam },
            width: 3,
            max_len: 10,
            ..DecodeOptions::default()
        };
        let retrieved = [(q.rq.clone(), q.rr.clone())];
        let x = models.respond(&q.q, &retrieved, &opts, None).unwrap();
        let y = loaded.respond(&q.q, &retrieved, &opts, None).unwrap();
        same_gen += usize::from(x == y);
    }
    verdict(
        8,
        "determinism and persistence",
        same_losses && same_gen == 20,
        &format!("first 10 losses bit-identical: {same_losses}; identical generations {same_gen}/20"),
    );
}

// ---------------------------------------------------------------- gate

#[test]
fn a9_gate_semantics() {
    let mut max_dp: f64 = 0.0;
    let mut exact_zero_gate = 0;
    for probe in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(900 + probe);
        let mut store = ParamStore::new();
        let vocab_size = 14;
        let cfg = ResponseConfig { emb: 6, hidden: 5, layers: 1 + (probe as usize % 2), dropout: 0.0 };
        let gen = ResponseGenerator::new(&mut store, &mut rng, "res", vocab_size, cfg, true).unwrap();
        let word =
            |rng: &mut ChaCha8Rng, n: usize| (0..n).map(|_| rng.gen_range(BLANK_ID..vocab_size)).collect::<Vec<_>>();
        let q = word(&mut rng, 4);
        let target = word(&mut rng, 5);
        let mem_a = vec![word(&mut rng, 3)];
        let mem_b = vec![word(&mut rng, 6), word(&mut rng, 2)];

        let mut tape = Tape::new(&store);
        let pa = gen.encode(&mut tape, &q, SkeletonMemory::Tokens(&mem_a)).unwrap();
        let pb = gen.encode(&mut tape, &q, SkeletonMemory::Tokens(&mem_b)).unwrap();
        let (_, sa) = gen.teacher_force(&mut tape, &pa, &target, Some(1.0)).unwrap();
        let (_, sb) = gen.teacher_force(&mut tape, &pb, &target, Some(1.0)).unwrap();
        for (x, y) in sa.iter().zip(&sb) {
            let (px, py) = (tape.value(x.log_probs).data(), tape.value(y.log_probs).data());
            for (u, v) in px.iter().zip(py) {
                max_dp = max_dp.max((u.exp() - v.exp()).abs());
            }
        }
        let (_, s0) = gen.teacher_force(&mut tape, &pa, &target, Some(0.0)).unwrap();
        if s0.iter().all(|st| tape.value(st.fused).data() == tape.value(st.skeleton_context).data()) {
            exact_zero_gate += 1;
        }
    }
    verdict(
        9,
        "gate semantics",
        max_dp < 1e-12 && exact_zero_gate == 50,
        &format!(
            "gate 1: max |dp| {max_dp:.1e} over 50 probes; gate 0: y equals skeleton context on {exact_zero_gate}/50"
        ),
    );
}
