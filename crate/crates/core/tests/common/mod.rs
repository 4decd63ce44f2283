#![allow(dead_code)]

use s2r_core::dataset::{DialoguePair, ProxySkeleton};
use s2r_core::text::{mask_tokens, tokenize, StopList};

/// Increasing index lists of `n` items selected by `mask`.
fn positions(mask: u32, n: usize) -> Vec<usize> {
    (0..n).filter(|i| mask & (1 << i) != 0).collect()
}

/// Brute-force proxy labels: enumerate every common subsequence of the
/// stop-filtered sequences, keep the longest, and break ties by the smallest
/// gold positions, then the smallest prototype positions.
pub fn oracle_proxy(r: &[String], rr: &[String], stop: &StopList) -> ProxySkeleton {
    let gold: Vec<&String> = r.iter().filter(|t| !stop.contains(t)).collect();
    let proto_pos: Vec<usize> = (0..rr.len()).filter(|&i| !stop.contains(&rr[i])).collect();
    assert!(gold.len() <= 16 && proto_pos.len() <= 16);
    let mut best: Option<(Vec<usize>, Vec<usize>)> = None;
    for gm in 0u32..(1 << gold.len()) {
        let gi = positions(gm, gold.len());
        for pm in 0u32..(1 << proto_pos.len()) {
            if pm.count_ones() as usize != gi.len() {
                continue;
            }
            let pj = positions(pm, proto_pos.len());
            if !gi.iter().zip(&pj).all(|(&i, &j)| *gold[i] == rr[proto_pos[j]]) {
                continue;
            }
            let better = match &best {
                None => true,
                Some((bi, bj)) => {
                    gi.len() > bi.len() || (gi.len() == bi.len() && (gi < *bi || (gi == *bi && pj < *bj)))
                }
            };
            if better {
                best = Some((gi.clone(), pj));
            }
        }
    }
    let mut labels = vec![0u8; rr.len()];
    for j in best.map(|b| b.1).unwrap_or_default() {
        labels[proto_pos[j]] = 1;
    }
    let skeleton = mask_tokens(rr, &labels).unwrap();
    ProxySkeleton { labels, skeleton }
}

pub fn toks(s: &str) -> Vec<String> {
    tokenize(s, false)
}

pub fn synthetic_pairs(n: usize, seed: u64, fillers: bool) -> Vec<DialoguePair> {
    s2r_core::synthetic::pairs(n, seed, fillers)
        .into_iter()
        .enumerate()
        .map(|(id, (q, r))| DialoguePair { id, query: toks(&q), response: toks(&r) })
        .collect()
}
