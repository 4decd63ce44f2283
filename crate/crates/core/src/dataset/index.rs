use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::{DatasetError, DialoguePair};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IndexSide {
    Query,
    Response,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub id: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DocStat {
    id: usize,
    length: usize,
    norm: f64,
}

/// TF-IDF inverted index with cosine scoring over one side of the pairs.
///
/// Term weight is `tf * idf` with `idf = ln(1 + N / (1 + df))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvertedIndex {
    keyed_on: IndexSide,
    /// token -> (pair id, term frequency), sorted by pair id
    postings: BTreeMap<String, Vec<(usize, u32)>>,
    /// sorted by id
    docs: Vec<DocStat>,
}

fn term_counts(tokens: &[String]) -> BTreeMap<&str, u32> {
    let mut tf = BTreeMap::new();
    for t in tokens {
        *tf.entry(t.as_str()).or_insert(0) += 1;
    }
    tf
}

impl InvertedIndex {
    pub fn build(pairs: &[DialoguePair], keyed_on: IndexSide) -> Result<Self, DatasetError> {
        if pairs.is_empty() {
            return Err(DatasetError::EmptyCorpus);
        }
        let mut sorted: Vec<&DialoguePair> = pairs.iter().collect();
        sorted.sort_by_key(|p| p.id);
        let side = |p: &DialoguePair| match keyed_on {
            IndexSide::Query => p.query.clone(),
            IndexSide::Response => p.response.clone(),
        };
        let mut postings: BTreeMap<String, Vec<(usize, u32)>> = BTreeMap::new();
        for p in &sorted {
            let toks = side(p);
            for (t, c) in term_counts(&toks) {
                postings.entry(t.to_owned()).or_default().push((p.id, c));
            }
        }
        let docs = sorted.iter().map(|p| DocStat { id: p.id, length: side(p).len(), norm: 0.0 }).collect();
        let mut idx = Self { keyed_on, postings, docs };
        // norms need the final document count for idf
        for (i, p) in sorted.iter().enumerate() {
            let norm =
                term_counts(&side(p)).into_iter().map(|(t, c)| (f64::from(c) * idx.idf(t)).powi(2)).sum::<f64>().sqrt();
            idx.docs[i].norm = norm;
        }
        Ok(idx)
    }

    pub fn keyed_on(&self) -> IndexSide {
        self.keyed_on
    }

    pub fn doc_count(&self) -> usize {
        self.docs.len()
    }

    pub fn doc_length(&self, id: usize) -> Option<usize> {
        self.doc(id).map(|d| d.length)
    }

    fn doc(&self, id: usize) -> Option<&DocStat> {
        self.docs.binary_search_by_key(&id, |d| d.id).ok().map(|i| &self.docs[i])
    }

    pub fn postings(&self, token: &str) -> &[(usize, u32)] {
        self.postings.get(token).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn df(&self, token: &str) -> usize {
        self.postings(token).len()
    }

    pub fn idf(&self, token: &str) -> f64 {
        let n = self.docs.len() as f64;
        (1.0 + n / (1.0 + self.df(token) as f64)).ln()
    }

    /// Top-`k` documents by cosine similarity; ties go to the smaller id.
    pub fn retrieve(&self, probe: &[String], k: usize) -> Vec<Hit> {
        self.retrieve_excluding(probe, k, None)
    }

    /// As [`retrieve`](Self::retrieve), never returning `exclude`.
    pub fn retrieve_excluding(&self, probe: &[String], k: usize, exclude: Option<usize>) -> Vec<Hit> {
        let mut qnorm = 0.0;
        let mut acc: HashMap<usize, f64> = HashMap::new();
        for (t, c) in term_counts(probe) {
            let plist = self.postings(t);
            if plist.is_empty() {
                continue;
            }
            let idf = self.idf(t);
            let wq = f64::from(c) * idf;
            qnorm += wq * wq;
            for &(id, tf) in plist {
                if Some(id) != exclude {
                    *acc.entry(id).or_default() += wq * f64::from(tf) * idf;
                }
            }
        }
        if acc.is_empty() || k == 0 {
            return Vec::new();
        }
        let qnorm = qnorm.sqrt();
        let mut hits: Vec<Hit> = acc
            .into_iter()
            .map(|(id, dot)| {
                let dnorm = self.doc(id).map_or(1.0, |d| d.norm);
                Hit { id, score: dot / (qnorm * dnorm) }
            })
            .collect();
        hits.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.id.cmp(&b.id)));
        hits.truncate(k);
        hits
    }
}

/// Test-time retrieval by query similarity, with no similarity band.
pub fn test_retrieval(query_index: &InvertedIndex, q: &[String], k: usize) -> Vec<Hit> {
    debug_assert_eq!(query_index.keyed_on(), IndexSide::Query);
    query_index.retrieve(q, k)
}
