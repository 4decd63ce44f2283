//! Text primitives: tokenization, vocabulary, stop lists and the
//! sequence algorithms (Jaccard, LCS, Levenshtein) used across the crate.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const BLANK: &str = "<blank>";

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const BOS_ID: usize = 2;
pub const EOS_ID: usize = 3;
pub const BLANK_ID: usize = 4;

/// Reserved tokens in id order.
pub const RESERVED: [&str; 5] = [PAD, UNK, BOS, EOS, BLANK];

/// An ordered sequence of non-empty tokens.
pub type TokenSeq = Vec<String>;

/// Splits on Unicode whitespace, optionally lowercasing first.
pub fn tokenize(text: &str, lowercase: bool) -> TokenSeq {
    if lowercase {
        text.to_lowercase().split_whitespace().map(str::to_owned).collect()
    } else {
        text.split_whitespace().map(str::to_owned).collect()
    }
}

pub fn join(tokens: &[String]) -> String {
    tokens.join(" ")
}

/// Jaccard similarity of the token sets. Two empty sequences are identical (1.0).
pub fn jaccard<S: AsRef<str>>(a: &[S], b: &[S]) -> f64 {
    let sa: HashSet<&str> = a.iter().map(AsRef::as_ref).collect();
    let sb: HashSet<&str> = b.iter().map(AsRef::as_ref).collect();
    if sa.is_empty() && sb.is_empty() {
        return 1.0;
    }
    let inter = sa.intersection(&sb).count();
    let union = sa.len() + sb.len() - inter;
    inter as f64 / union as f64
}

/// Suffix table: `t[i][j]` is the LCS length of `a[i..]` and `b[j..]`.
fn lcs_suffix_table<T: PartialEq>(a: &[T], b: &[T]) -> Vec<Vec<usize>> {
    let (n, m) = (a.len(), b.len());
    let mut t = vec![vec![0usize; m + 1]; n + 1];
    for i in (0..n).rev() {
        for j in (0..m).rev() {
            t[i][j] = if a[i] == b[j] { t[i + 1][j + 1] + 1 } else { t[i + 1][j].max(t[i][j + 1]) };
        }
    }
    t
}

/// Index pairs `(i, j)` of one longest common subsequence of `a` and `b`.
///
/// Among all maximal alignments this returns the one whose positions in `a`
/// are lexicographically smallest, then whose positions in `b` are.
pub fn lcs_alignment<T: PartialEq>(a: &[T], b: &[T]) -> Vec<(usize, usize)> {
    let t = lcs_suffix_table(a, b);
    let mut out = Vec::with_capacity(t[0][0]);
    let (mut from_i, mut from_j) = (0, 0);
    // each step takes the earliest a-position that can still complete a
    // maximal alignment, matched at its earliest b-position; an earlier
    // b-position only leaves more room for the remaining matches
    for remaining in (1..=t[0][0]).rev() {
        let next = (from_i..a.len()).find_map(|i| {
            (from_j..b.len()).find(|&j| a[i] == b[j] && t[i + 1][j + 1] + 1 >= remaining).map(|j| (i, j))
        });
        let (i, j) = next.expect("the suffix table guarantees a completion");
        out.push((i, j));
        from_i = i + 1;
        from_j = j + 1;
    }
    out
}

/// One longest common subsequence, earliest matches in `a` preferred.
pub fn lcs(a: &[String], b: &[String]) -> TokenSeq {
    lcs_alignment(a, b).into_iter().map(|(i, _)| a[i].clone()).collect()
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    lcs_suffix_table(a, b)[0][0]
}

/// Token-level Levenshtein distance.
pub fn edit_distance<S: AsRef<str>>(a: &[S], b: &[S]) -> usize {
    let m = b.len();
    let mut prev: Vec<usize> = (0..=m).collect();
    let mut cur = vec![0usize; m + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x.as_ref() != y.as_ref());
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[m]
}

/// Replaces every token whose label is 0 with [`BLANK`]. Returns `None`
/// when the lengths differ.
pub fn mask_tokens(tokens: &[String], labels: &[u8]) -> Option<TokenSeq> {
    (tokens.len() == labels.len())
        .then(|| tokens.iter().zip(labels).map(|(t, &m)| if m == 1 { t.clone() } else { BLANK.to_owned() }).collect())
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StopList {
    words: BTreeSet<String>,
}

impl StopList {
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self { words: words.into_iter().map(Into::into).collect() }
    }

    /// One token per line; blank lines and `#` comments are ignored.
    pub fn parse(text: &str, lowercase: bool) -> Self {
        let words = text.lines().map(|l| l.split('#').next().unwrap_or("").trim()).filter(|l| !l.is_empty()).map(|l| {
            if lowercase {
                l.to_lowercase()
            } else {
                l.to_owned()
            }
        });
        Self::new(words)
    }

    pub fn load(path: &Path, lowercase: bool) -> io::Result<Self> {
        Ok(Self::parse(&fs::read_to_string(path)?, lowercase))
    }

    pub fn contains(&self, token: &str) -> bool {
        self.words.contains(token)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn filter(&self, tokens: &[String]) -> TokenSeq {
        tokens.iter().filter(|t| !self.contains(t)).cloned().collect()
    }
}

/// Token/id bijection with the five reserved tokens at ids 0..=4.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    id_of: HashMap<String, usize>,
    token_of: Vec<String>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::from_tokens(Vec::<String>::new())
    }
}

impl Vocab {
    /// Builds a vocabulary from non-reserved tokens in id order. Duplicates
    /// and reserved tokens in the input are skipped.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Vocab { id_of: HashMap::new(), token_of: Vec::new() };
        for r in RESERVED {
            v.push(r.to_owned());
        }
        for t in tokens {
            let t = t.into();
            if !v.id_of.contains_key(&t) {
                v.push(t);
            }
        }
        v
    }

    fn push(&mut self, t: String) {
        self.id_of.insert(t.clone(), self.token_of.len());
        self.token_of.push(t);
    }

    /// Frequency-ranked vocabulary over token sequences. Ties are broken
    /// lexicographically; at most `max_size` entries including reserved ids.
    pub fn build<'a, I>(seqs: I, max_size: usize, min_freq: usize) -> Self
    where
        I: IntoIterator<Item = &'a [String]>,
    {
        let max_size = max_size.max(RESERVED.len());
        let mut freq: HashMap<&str, usize> = HashMap::new();
        for seq in seqs {
            for t in seq {
                *freq.entry(t.as_str()).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> =
            freq.into_iter().filter(|(t, c)| *c >= min_freq && !RESERVED.contains(t)).collect();
        ranked.sort_by(|x, y| y.1.cmp(&x.1).then_with(|| x.0.cmp(y.0)));
        ranked.truncate(max_size - RESERVED.len());
        Self::from_tokens(ranked.into_iter().map(|(t, _)| t.to_owned()))
    }

    pub fn len(&self) -> usize {
        self.token_of.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        self.id_of.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.id_of.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        self.token_of.get(id).map(String::as_str).unwrap_or(UNK)
    }

    pub fn tokens(&self) -> &[String] {
        &self.token_of
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> TokenSeq {
        ids.iter().map(|&i| self.token(i).to_owned()).collect()
    }
}

impl Serialize for Vocab {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.token_of.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Vocab {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let tokens = Vec::<String>::deserialize(d)?;
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(serde::de::Error::custom("vocabulary must start with the reserved tokens"));
        }
        let v = Vocab::from_tokens(tokens[RESERVED.len()..].iter().cloned());
        if v.len() != tokens.len() {
            return Err(serde::de::Error::custom("vocabulary contains duplicate tokens"));
        }
        Ok(v)
    }
}
