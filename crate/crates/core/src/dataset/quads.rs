use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DialoguePair, IndexSide, InvertedIndex, ProxySkeleton};
use crate::text::{jaccard, join, tokenize, StopList, TokenSeq};

/// A training record joining a pair `(q, r)` with one retrieved pair `(rq, rr)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "QuadWire", into = "QuadWire")]
pub struct Quadruple {
    pub q: TokenSeq,
    pub r: TokenSeq,
    /// retrieved query
    pub rq: TokenSeq,
    /// retrieved response
    pub rr: TokenSeq,
    pub score: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct QuadWire {
    q: String,
    r: String,
    rq: String,
    rr: String,
    score: f64,
}

impl From<QuadWire> for Quadruple {
    fn from(w: QuadWire) -> Self {
        Self {
            q: tokenize(&w.q, false),
            r: tokenize(&w.r, false),
            rq: tokenize(&w.rq, false),
            rr: tokenize(&w.rr, false),
            score: w.score,
        }
    }
}

impl From<Quadruple> for QuadWire {
    fn from(q: Quadruple) -> Self {
        Self { q: join(&q.q), r: join(&q.r), rq: join(&q.rq), rr: join(&q.rr), score: q.score }
    }
}

impl Quadruple {
    pub fn proxy_skeleton(&self, stop: &StopList) -> ProxySkeleton {
        super::make_proxy_skeleton(&self.r, &self.rr, stop)
    }

    pub fn labeled(self, stop: &StopList) -> LabeledQuad {
        let m = self.proxy_skeleton(stop).labels;
        LabeledQuad { quad: self, m }
    }
}

/// A quadruple with proxy keep/mask labels over `rr`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledQuad {
    #[serde(flatten)]
    pub quad: Quadruple,
    pub m: Vec<u8>,
}

#[derive(Debug, Clone)]
pub struct QuadOptions {
    /// candidates retrieved per pair
    pub k: usize,
    pub lo: f64,
    pub hi: f64,
    /// when set, Jaccard is computed on stop-word-filtered responses
    pub jaccard_stoplist: Option<StopList>,
    /// keep at most this many quadruples, chosen by a seeded shuffle
    pub max_quads: Option<usize>,
    pub seed: u64,
}

impl Default for QuadOptions {
    fn default() -> Self {
        Self { k: 30, lo: 0.3, hi: 0.7, jaccard_stoplist: None, max_quads: None, seed: 0 }
    }
}

impl QuadOptions {
    pub fn similarity(&self, r: &[String], rr: &[String]) -> f64 {
        match &self.jaccard_stoplist {
            Some(s) => jaccard(&s.filter(r), &s.filter(rr)),
            None => jaccard(r, rr),
        }
    }

    pub fn in_band(&self, r: &[String], rr: &[String]) -> bool {
        let j = self.similarity(r, rr);
        self.lo <= j && j <= self.hi
    }
}

/// Builds training quadruples by response-side retrieval under the Jaccard band.
///
/// A pair never retrieves itself. Output is ordered by (pair id, retrieval rank);
/// the optional cap subsamples before that sort so the order stays stable.
pub fn build_quadruples(pairs: &[DialoguePair], response_index: &InvertedIndex, opts: &QuadOptions) -> Vec<Quadruple> {
    assert_eq!(response_index.keyed_on(), IndexSide::Response, "quadruples need a response-keyed index");
    let by_id: std::collections::HashMap<usize, &DialoguePair> = pairs.iter().map(|p| (p.id, p)).collect();
    let mut keyed: Vec<((usize, usize), Quadruple)> = Vec::new();
    for p in pairs {
        for (rank, hit) in response_index.retrieve_excluding(&p.response, opts.k, Some(p.id)).into_iter().enumerate() {
            let Some(other) = by_id.get(&hit.id) else { continue };
            if !opts.in_band(&p.response, &other.response) {
                continue;
            }
            let quad = Quadruple {
                q: p.query.clone(),
                r: p.response.clone(),
                rq: other.query.clone(),
                rr: other.response.clone(),
                score: hit.score,
            };
            keyed.push(((p.id, rank), quad));
        }
    }
    if let Some(cap) = opts.max_quads {
        if keyed.len() > cap {
            keyed.shuffle(&mut ChaCha8Rng::seed_from_u64(opts.seed));
            keyed.truncate(cap);
        }
    }
    keyed.sort_by_key(|(k, _)| *k);
    keyed.into_iter().map(|(_, q)| q).collect()
}
