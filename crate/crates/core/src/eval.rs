//! Automatic evaluation: dist-n, skeleton label metrics and analyses bucketed
//! by query similarity.

use std::collections::HashSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text::edit_distance;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("dist-n needs at least one token")]
    NoTokens,
    #[error("n must be at least 1")]
    BadN,
    #[error("example {index}: {what} length {got} does not match {expected}")]
    Length { index: usize, what: &'static str, expected: usize, got: usize },
    #[error("{what}: {got} items, expected {expected}")]
    Misaligned { what: &'static str, expected: usize, got: usize },
}

/// Distinct n-grams across all responses divided by the total token count.
pub fn dist_n<S: AsRef<str>>(responses: &[Vec<S>], n: usize) -> Result<f64, EvalError> {
    if n == 0 {
        return Err(EvalError::BadN);
    }
    let total: usize = responses.iter().map(Vec::len).sum();
    if total == 0 {
        return Err(EvalError::NoTokens);
    }
    let mut grams: HashSet<Vec<&str>> = HashSet::new();
    for r in responses {
        for w in r.windows(n) {
            grams.insert(w.iter().map(AsRef::as_ref).collect());
        }
    }
    Ok(grams.len() as f64 / total as f64)
}

/// dist-n after removing from each response the tokens that occur in its query.
pub fn dist_n_without_query<S: AsRef<str>>(
    responses: &[Vec<S>],
    queries: &[Vec<S>],
    n: usize,
) -> Result<f64, EvalError> {
    if responses.len() != queries.len() {
        return Err(EvalError::Misaligned { what: "queries", expected: responses.len(), got: queries.len() });
    }
    let filtered: Vec<Vec<&str>> = responses
        .iter()
        .zip(queries)
        .map(|(r, q)| {
            let qs: HashSet<&str> = q.iter().map(AsRef::as_ref).collect();
            r.iter().map(AsRef::as_ref).filter(|t| !qs.contains(t)).collect()
        })
        .collect();
    dist_n(&filtered, n)
}

/// Word-level micro-averaged metrics with "keep" as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SkeletonMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub tokens: usize,
}

pub fn skeleton_metrics(predicted: &[Vec<u8>], proxy: &[Vec<u8>]) -> Result<SkeletonMetrics, EvalError> {
    if predicted.len() != proxy.len() {
        return Err(EvalError::Misaligned {
            what: "predicted label lists",
            expected: proxy.len(),
            got: predicted.len(),
        });
    }
    let (mut tp, mut fp, mut fneg, mut agree, mut n) = (0usize, 0usize, 0usize, 0usize, 0usize);
    for (index, (p, g)) in predicted.iter().zip(proxy).enumerate() {
        if p.len() != g.len() {
            return Err(EvalError::Length { index, what: "predicted labels", expected: g.len(), got: p.len() });
        }
        for (&a, &b) in p.iter().zip(g) {
            match (a == 1, b == 1) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fneg += 1,
                (false, false) => {}
            }
            agree += usize::from((a == 1) == (b == 1));
            n += 1;
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fneg);
    let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    Ok(SkeletonMetrics { precision, recall, f1, accuracy: ratio(agree, n), tokens: n })
}

/// Default similarity edges; the top bucket spans [0.6, 1.0].
pub const DEFAULT_EDGES: [f64; 5] = [0.0, 0.2, 0.4, 0.6, 1.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub lo: f64,
    pub hi: f64,
    /// mean value of the records in the bucket, 0 when empty
    pub mean: f64,
    pub count: usize,
}

/// Bucket index for `x`: half-open `[lo, hi)` ranges with the last one
/// closed. Out-of-range values land in the nearest end bucket.
fn bucket_of(edges: &[f64], x: f64) -> usize {
    let last = edges.len() - 2;
    (0..=last).find(|&i| x < edges[i + 1]).unwrap_or(last)
}

/// Groups `(similarity, value)` records by similarity and averages the values.
///
/// # Panics
/// If `edges` has fewer than two entries.
pub fn similarity_buckets(records: &[(f64, f64)], edges: &[f64]) -> Vec<Bucket> {
    assert!(edges.len() >= 2, "need at least one bucket");
    let mut sums = vec![(0.0, 0usize); edges.len() - 1];
    for &(s, v) in records {
        let b = bucket_of(edges, s);
        sums[b].0 += v;
        sums[b].1 += 1;
    }
    sums.iter()
        .enumerate()
        .map(|(i, &(sum, count))| Bucket {
            lo: edges[i],
            hi: edges[i + 1],
            mean: if count == 0 { 0.0 } else { sum / count as f64 },
            count,
        })
        .collect()
}

/// Mean token edit distance between generated and retrieved responses,
/// bucketed by query similarity.
pub fn copy_rate_report<S: AsRef<str>>(
    generated: &[Vec<S>],
    retrieved: &[Vec<S>],
    similarity: &[f64],
    edges: &[f64],
) -> Result<Vec<Bucket>, EvalError> {
    if generated.len() != retrieved.len() {
        return Err(EvalError::Misaligned {
            what: "retrieved responses",
            expected: generated.len(),
            got: retrieved.len(),
        });
    }
    if similarity.len() != generated.len() {
        return Err(EvalError::Misaligned { what: "similarities", expected: generated.len(), got: similarity.len() });
    }
    let records: Vec<(f64, f64)> =
        generated.iter().zip(retrieved).zip(similarity).map(|((g, r), &s)| (s, edit_distance(g, r) as f64)).collect();
    Ok(similarity_buckets(&records, edges))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub responses: usize,
    pub dist1: f64,
    pub dist2: f64,
    pub dist1_without_query: f64,
    pub dist2_without_query: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub skeleton: Option<SkeletonMetrics>,
    /// mean edit distance to the retrieved response per query-similarity bucket
    pub edit_distance_buckets: Vec<Bucket>,
    /// mean length-normalized log-prob per query-similarity bucket
    pub logprob_buckets: Vec<Bucket>,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "responses            {}", self.responses);
        let _ = writeln!(s, "dist-1               {:.4}", self.dist1);
        let _ = writeln!(s, "dist-2               {:.4}", self.dist2);
        let _ = writeln!(s, "dist-1 (no q words)  {:.4}", self.dist1_without_query);
        let _ = writeln!(s, "dist-2 (no q words)  {:.4}", self.dist2_without_query);
        if let Some(m) = &self.skeleton {
            let _ = writeln!(
                s,
                "skeleton             P {:.4}  R {:.4}  F1 {:.4}  Acc {:.4}  ({} tokens)",
                m.precision, m.recall, m.f1, m.accuracy, m.tokens
            );
        }
        let _ = writeln!(s, "\nquery similarity     count  edit-dist  logprob/token");
        for (e, l) in self.edit_distance_buckets.iter().zip(&self.logprob_buckets) {
            let _ =
                writeln!(s, "[{:.1}, {:.1}]           {:>5}  {:>9.3}  {:>13.4}", e.lo, e.hi, e.count, e.mean, l.mean);
        }
        s
    }

    /// Plot data: one row per bucket.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("lo,hi,count,mean_edit_distance,mean_logprob\n");
        for (e, l) in self.edit_distance_buckets.iter().zip(&self.logprob_buckets) {
            let _ = writeln!(s, "{},{},{},{},{}", e.lo, e.hi, e.count, e.mean, l.mean);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::tokenize;

    fn seqs(xs: &[&str]) -> Vec<Vec<String>> {
        xs.iter().map(|s| tokenize(s, false)).collect()
    }

    #[test]
    fn dist_examples() {
        assert_eq!(dist_n(&seqs(&["a b", "a c"]), 1).unwrap(), 0.75);
        assert_eq!(dist_n(&seqs(&["a b c"]), 2).unwrap(), 2.0 / 3.0);
        assert_eq!(dist_n(&seqs(&["a"]), 1).unwrap(), 1.0);
        assert_eq!(dist_n(&seqs(&["", ""]), 1), Err(EvalError::NoTokens));
        assert_eq!(dist_n(&seqs(&["a"]), 0), Err(EvalError::BadN));
    }

    #[test]
    fn dist_order_and_duplication() {
        let a = seqs(&["a b c", "b c d", "x"]);
        let mut rev = a.clone();
        rev.reverse();
        let doubled: Vec<_> = a.iter().chain(&a).cloned().collect();
        for n in [1, 2] {
            assert_eq!(dist_n(&a, n).unwrap(), dist_n(&rev, n).unwrap());
            assert_eq!(dist_n(&doubled, n).unwrap(), dist_n(&a, n).unwrap() / 2.0);
        }
    }

    #[test]
    fn dist_without_query_words() {
        let r = seqs(&["i like tea", "tea is good"]);
        let q = seqs(&["do you like tea", "is it good"]);
        // remaining: [i], [tea]
        assert_eq!(dist_n_without_query(&r, &q, 1).unwrap(), 1.0);
        assert!(dist_n_without_query(&r, &q[..1], 1).is_err());
    }

    #[test]
    fn skeleton_confusion() {
        let perfect = skeleton_metrics(&[vec![1, 0, 1]], &[vec![1, 0, 1]]).unwrap();
        assert_eq!((perfect.precision, perfect.recall, perfect.f1, perfect.accuracy), (1.0, 1.0, 1.0, 1.0));
        let all_keep = skeleton_metrics(&[vec![1, 1, 1, 1]], &[vec![1, 0, 1, 0]]).unwrap();
        assert_eq!((all_keep.recall, all_keep.accuracy), (1.0, 0.5));
        let none = skeleton_metrics(&[vec![0, 0]], &[vec![0, 0]]).unwrap();
        assert_eq!((none.precision, none.recall, none.f1, none.accuracy), (0.0, 0.0, 0.0, 1.0));
        assert_eq!(
            skeleton_metrics(&[vec![1], vec![1, 0]], &[vec![1], vec![1]]),
            Err(EvalError::Length { index: 1, what: "predicted labels", expected: 1, got: 2 })
        );
    }

    #[test]
    fn buckets_partition() {
        let recs = [(0.0, 1.0), (0.2, 2.0), (0.59, 3.0), (0.6, 4.0), (1.0, 5.0), (0.8, 6.0)];
        let b = similarity_buckets(&recs, &DEFAULT_EDGES);
        assert_eq!(b.iter().map(|x| x.count).collect::<Vec<_>>(), vec![1, 1, 1, 3]);
        assert_eq!(b[3].mean, 5.0);
        assert_eq!((b[3].lo, b[3].hi), (0.6, 1.0));
        let one = similarity_buckets(&[(0.1, 2.0), (0.15, 4.0)], &DEFAULT_EDGES);
        assert_eq!(one[0].mean, 3.0);
        assert_eq!(one[1].count, 0);
    }

    #[test]
    fn copy_rate() {
        let g = seqs(&["a b", "c d e"]);
        let same = copy_rate_report(&g, &g, &[0.1, 0.7], &DEFAULT_EDGES).unwrap();
        assert!(same.iter().all(|b| b.mean == 0.0));
        assert_eq!(same.len(), 4);
        let other = seqs(&["x y z", "q"]);
        let d = copy_rate_report(&g, &other, &[0.1, 0.1], &DEFAULT_EDGES).unwrap();
        assert_eq!(d[0].mean, 3.0);
        assert!(copy_rate_report(&g, &other[..1], &[0.1], &DEFAULT_EDGES).is_err());
    }
}
