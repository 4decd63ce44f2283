//! Corpus ingestion, retrieval, training-quadruple construction and proxy
//! skeleton labelling.

mod index;
mod proxy;
mod quads;

pub use index::{test_retrieval, Hit, IndexSide, InvertedIndex};
pub use proxy::{make_proxy_skeleton, ProxySkeleton};
pub use quads::{build_quadruples, LabeledQuad, QuadOptions, Quadruple};

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text::{tokenize, TokenSeq};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("cannot index an empty corpus")]
    EmptyCorpus,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialoguePair {
    pub id: usize,
    pub query: TokenSeq,
    pub response: TokenSeq,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPair {
    query: String,
    response: String,
}

#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub pairs: Vec<DialoguePair>,
    /// Records dropped because the query or response had no tokens.
    pub skipped: usize,
}

/// Parses a JSON-lines corpus of `{"query": .., "response": ..}` objects.
///
/// Blank lines are ignored. Pairs get sequential ids in file order.
pub fn parse_pairs<R: BufRead>(reader: R, lowercase: bool) -> Result<Corpus, DatasetError> {
    let mut corpus = Corpus::default();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| DatasetError::Malformed { line: i + 1, msg: e.to_string() })?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawPair =
            serde_json::from_str(&line).map_err(|e| DatasetError::Malformed { line: i + 1, msg: e.to_string() })?;
        let query = tokenize(&raw.query, lowercase);
        let response = tokenize(&raw.response, lowercase);
        if query.is_empty() || response.is_empty() {
            corpus.skipped += 1;
            continue;
        }
        corpus.pairs.push(DialoguePair { id: corpus.pairs.len(), query, response });
    }
    if corpus.skipped > 0 {
        log::warn!("skipped {} records with an empty query or response", corpus.skipped);
    }
    Ok(corpus)
}

pub fn load_pairs(path: &Path, lowercase: bool) -> Result<Corpus, DatasetError> {
    let f = File::open(path).map_err(|e| DatasetError::Io { path: path.to_owned(), source: e })?;
    parse_pairs(BufReader::new(f), lowercase)
}
