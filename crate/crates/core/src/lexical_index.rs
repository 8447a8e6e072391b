//! Okapi BM25 over chunks.
//!
//! score(q, d) = Σ_{t ∈ q} idf(t) · tf(t,d)·(k1+1) / (tf(t,d) + k1·(1 − b + b·|d|/avgdl))
//! idf(t)      = ln((N − df(t) + 0.5) / (df(t) + 0.5) + 1)
//!
//! The sum runs over query tokens with multiplicity. Terms are lowercased
//! whitespace tokens, no stemming.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::ChunkStore;
use crate::error::{Error, Result};

pub const DEFAULT_K1: f64 = 1.2;
pub const DEFAULT_B: f64 = 0.75;
const FORMAT_VERSION: u32 = 1;

pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(|w| w.to_lowercase())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Posting {
    pub doc: u32,
    pub tf: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bm25Index {
    version: u32,
    k1: f64,
    b: f64,
    chunk_ids: Vec<String>,
    doc_lengths: Vec<u32>,
    total_length: u64,
    postings: BTreeMap<String, Vec<Posting>>,
}

impl Bm25Index {
    pub fn build(chunks: &ChunkStore, k1: f64, b: f64) -> Result<Self> {
        if chunks.is_empty() {
            return Err(Error::NothingToIndex);
        }
        if !(k1 > 0.0 && k1.is_finite()) {
            return Err(Error::InvalidArgument(format!("k1 must be > 0, got {k1}")));
        }
        if !(0.0..=1.0).contains(&b) {
            return Err(Error::InvalidArgument(format!("b must be in [0,1], got {b}")));
        }
        let mut postings: BTreeMap<String, Vec<Posting>> = BTreeMap::new();
        let mut doc_lengths = Vec::with_capacity(chunks.len());
        let mut chunk_ids = Vec::with_capacity(chunks.len());
        let mut total_length = 0u64;
        for (doc, chunk) in chunks.iter().enumerate() {
            let mut tfs: BTreeMap<String, u32> = BTreeMap::new();
            let mut len = 0u32;
            for term in tokenize(&chunk.text) {
                *tfs.entry(term).or_default() += 1;
                len += 1;
            }
            for (term, tf) in tfs {
                postings.entry(term).or_default().push(Posting {
                    doc: doc as u32,
                    tf,
                });
            }
            doc_lengths.push(len);
            chunk_ids.push(chunk.chunk_id.clone());
            total_length += u64::from(len);
        }
        Ok(Bm25Index {
            version: FORMAT_VERSION,
            k1,
            b,
            chunk_ids,
            doc_lengths,
            total_length,
            postings,
        })
    }

    pub fn k1(&self) -> f64 {
        self.k1
    }

    pub fn b(&self) -> f64 {
        self.b
    }

    pub fn corpus_size(&self) -> usize {
        self.chunk_ids.len()
    }

    pub fn avg_doc_length(&self) -> f64 {
        self.total_length as f64 / self.chunk_ids.len() as f64
    }

    pub fn chunk_ids(&self) -> &[String] {
        &self.chunk_ids
    }

    pub fn doc_length(&self, chunk_id: &str) -> Option<u32> {
        self.position(chunk_id).map(|i| self.doc_lengths[i])
    }

    pub fn document_frequency(&self, term: &str) -> usize {
        self.postings.get(term).map_or(0, Vec::len)
    }

    pub fn postings(&self, term: &str) -> &[Posting] {
        self.postings.get(term).map_or(&[], Vec::as_slice)
    }

    fn position(&self, chunk_id: &str) -> Option<usize> {
        self.chunk_ids.iter().position(|c| c == chunk_id)
    }

    pub fn idf(&self, term: &str) -> f64 {
        let n = self.corpus_size() as f64;
        let df = self.document_frequency(term) as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }

    /// BM25 score of `query_text` against every indexed chunk, in index order.
    pub fn score_all(&self, query_text: &str) -> Vec<f64> {
        let mut scores = vec![0.0; self.corpus_size()];
        let avgdl = self.avg_doc_length();
        // group repeated query terms so each postings list is walked once
        let mut qtf: BTreeMap<String, u32> = BTreeMap::new();
        for t in tokenize(query_text) {
            *qtf.entry(t).or_default() += 1;
        }
        for (term, mult) in qtf {
            let Some(list) = self.postings.get(&term) else {
                continue;
            };
            let idf = self.idf(&term);
            for p in list {
                let tf = f64::from(p.tf);
                let dl = f64::from(self.doc_lengths[p.doc as usize]);
                let norm = tf + self.k1 * (1.0 - self.b + self.b * dl / avgdl);
                scores[p.doc as usize] += f64::from(mult) * idf * tf * (self.k1 + 1.0) / norm;
            }
        }
        scores
    }

    /// Ranked chunks with positive score, descending, ties by ascending id.
    pub fn top_n(&self, query_text: &str, n: usize) -> Vec<(String, f64)> {
        self.top_n_excluding(query_text, n, None)
    }

    /// As [`Bm25Index::top_n`], dropping `exclude` (the query's own chunk).
    pub fn top_n_excluding(
        &self,
        query_text: &str,
        n: usize,
        exclude: Option<&str>,
    ) -> Vec<(String, f64)> {
        let scores = self.score_all(query_text);
        let mut ranked: Vec<(usize, f64)> = scores
            .into_iter()
            .enumerate()
            .filter(|&(i, s)| s > 0.0 && Some(self.chunk_ids[i].as_str()) != exclude)
            .collect();
        ranked.sort_by(|a, b| {
            b.1.total_cmp(&a.1)
                .then_with(|| self.chunk_ids[a.0].cmp(&self.chunk_ids[b.0]))
        });
        ranked.truncate(n);
        ranked
            .into_iter()
            .map(|(i, s)| (self.chunk_ids[i].clone(), s))
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let idx: Bm25Index = serde_json::from_str(s)?;
        if idx.version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported bm25 index version {}",
                idx.version
            )));
        }
        if idx.doc_lengths.len() != idx.chunk_ids.len() {
            return Err(Error::Format("doc_lengths/chunk_ids length mismatch".into()));
        }
        Ok(idx)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Chunk;

    fn store(texts: &[&str]) -> ChunkStore {
        ChunkStore::from_chunks(
            texts
                .iter()
                .enumerate()
                .map(|(i, t)| Chunk {
                    chunk_id: format!("c{i}"),
                    doc_id: format!("d{i}"),
                    ordinal: 0,
                    text: t.to_string(),
                    word_count: t.split_whitespace().count(),
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn statistics() {
        let idx = Bm25Index::build(&store(&["a b c", "a b", "x y z w"]), 1.2, 0.75).unwrap();
        assert_eq!(idx.corpus_size(), 3);
        assert!((idx.avg_doc_length() - 3.0).abs() < 1e-12);
        assert_eq!(idx.document_frequency("a"), 2);
    }

    #[test]
    fn identical_chunks_identical_lengths() {
        let idx = Bm25Index::build(&store(&["same text here", "same text here"]), 1.2, 0.75).unwrap();
        assert_eq!(idx.doc_length("c0"), idx.doc_length("c1"));
    }

    #[test]
    fn empty_store_errors() {
        let err = Bm25Index::build(&ChunkStore::default(), 1.2, 0.75).unwrap_err();
        assert_eq!(err.to_string(), "nothing to index");
    }

    #[test]
    fn bad_parameters_rejected() {
        let s = store(&["a"]);
        assert!(Bm25Index::build(&s, 0.0, 0.5).is_err());
        assert!(Bm25Index::build(&s, 1.2, 1.5).is_err());
    }

    #[test]
    fn absent_term_gives_empty_list() {
        let idx = Bm25Index::build(&store(&["a b", "c d", "e f"]), 1.2, 0.75).unwrap();
        assert!(idx.top_n("zzz", 5).is_empty());
        assert!(idx.top_n("   ", 5).is_empty());
    }

    #[test]
    fn single_hit_is_singleton() {
        let idx = Bm25Index::build(&store(&["a b", "c d", "e f"]), 1.2, 0.75).unwrap();
        let hits = idx.top_n("d", 5);
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].0, "c1");
    }

    #[test]
    fn ties_break_by_ascending_id() {
        let idx = Bm25Index::build(&store(&["q r", "q r", "s t"]), 1.2, 0.75).unwrap();
        let hits = idx.top_n("q", 5);
        assert_eq!(hits.iter().map(|h| h.0.as_str()).collect::<Vec<_>>(), ["c0", "c1"]);
        let hits = idx.top_n_excluding("q", 5, Some("c0"));
        assert_eq!(hits.len(), 1);
    }

    #[test]
    fn case_is_folded() {
        let idx = Bm25Index::build(&store(&["Apple pie", "banana"]), 1.2, 0.75).unwrap();
        assert_eq!(idx.top_n("APPLE", 3)[0].0, "c0");
    }

    #[test]
    fn json_round_trip_is_exact() {
        let idx = Bm25Index::build(&store(&["a b c", "a b", "x y z w"]), 1.3, 0.6).unwrap();
        let s = idx.to_json().unwrap();
        let back = Bm25Index::from_json(&s).unwrap();
        assert_eq!(idx, back);
        assert_eq!(s, back.to_json().unwrap());
    }
}
