//! Document ingestion and fixed word-count chunking.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_CHUNK_SIZE: usize = 300;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub text: String,
    pub source_tag: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusFormat {
    Jsonl,
    PlainDir,
}

impl std::str::FromStr for CorpusFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jsonl" => Ok(CorpusFormat::Jsonl),
            "plain_dir" | "plain-dir" | "dir" => Ok(CorpusFormat::PlainDir),
            other => Err(Error::InvalidArgument(format!("unknown corpus format {other:?}"))),
        }
    }
}

/// Ordered documents with unique ids.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DocumentSet {
    docs: Vec<Document>,
}

impl DocumentSet {
    pub fn new(docs: Vec<Document>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(docs.len());
        for d in &docs {
            if !seen.insert(d.doc_id.as_str()) {
                return Err(Error::InvalidArgument(format!("duplicate doc_id {:?}", d.doc_id)));
            }
        }
        Ok(DocumentSet { docs })
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Document> {
        self.docs.iter()
    }

    pub fn into_inner(self) -> Vec<Document> {
        self.docs
    }
}

#[derive(Deserialize)]
struct CorpusLine {
    id: Option<serde_json::Value>,
    text: Option<String>,
    source: Option<String>,
}

pub fn ingest_documents(path: &Path, format: CorpusFormat) -> Result<DocumentSet> {
    match format {
        CorpusFormat::Jsonl => ingest_jsonl(path),
        CorpusFormat::PlainDir => ingest_dir(path),
    }
}

fn ingest_jsonl(path: &Path) -> Result<DocumentSet> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let default_source = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut docs = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CorpusLine = serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
            line: lineno,
            reason: e.to_string(),
        })?;
        let id = match rec.id {
            Some(serde_json::Value::String(s)) => s,
            Some(serde_json::Value::Number(n)) => n.to_string(),
            Some(_) => return Err(malformed(lineno, "`id` must be a string")),
            None => return Err(malformed(lineno, "missing `id`")),
        };
        let text = rec.text.ok_or_else(|| malformed(lineno, "missing `text`"))?;
        if text.split_whitespace().next().is_none() {
            return Err(malformed(lineno, "`text` is empty after whitespace normalization"));
        }
        if !seen.insert(id.clone()) {
            return Err(malformed(lineno, &format!("duplicate id {id:?}")));
        }
        docs.push(Document {
            doc_id: id,
            text,
            source_tag: rec.source.unwrap_or_else(|| default_source.clone()),
        });
    }
    if docs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(DocumentSet { docs })
}

fn malformed(line: usize, reason: &str) -> Error {
    Error::MalformedRecord {
        line,
        reason: reason.to_string(),
    }
}

fn ingest_dir(path: &Path) -> Result<DocumentSet> {
    let source = path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut entries: Vec<_> = fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "txt"))
        .collect();
    entries.sort();
    let mut docs = Vec::with_capacity(entries.len());
    for p in entries {
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let doc_id = p.file_name().unwrap().to_string_lossy().into_owned();
        docs.push(Document {
            doc_id,
            text,
            source_tag: source.clone(),
        });
    }
    if docs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(DocumentSet { docs })
}

/// Write a document set in the corpus JSONL format (`id`, `text`, `source`).
pub fn write_documents(docs: &DocumentSet, path: &Path) -> Result<()> {
    #[derive(Serialize)]
    struct Out<'a> {
        id: &'a str,
        text: &'a str,
        source: &'a str,
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for d in docs.iter() {
        let rec = Out {
            id: &d.doc_id,
            text: &d.text,
            source: &d.source_tag,
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub chunk_id: String,
    pub doc_id: String,
    pub ordinal: usize,
    pub text: String,
    pub word_count: usize,
}

impl Chunk {
    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.text.split_whitespace()
    }
}

pub fn chunk_id(doc_id: &str, ordinal: usize) -> String {
    format!("{doc_id}#{ordinal}")
}

/// Chunks in corpus order with an id lookup.
#[derive(Debug, Clone, Default)]
pub struct ChunkStore {
    chunks: Vec<Chunk>,
    by_id: HashMap<String, usize>,
}

impl PartialEq for ChunkStore {
    fn eq(&self, other: &Self) -> bool {
        self.chunks == other.chunks
    }
}

impl ChunkStore {
    pub fn from_chunks(chunks: Vec<Chunk>) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(chunks.len());
        for (i, c) in chunks.iter().enumerate() {
            if by_id.insert(c.chunk_id.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate chunk_id {:?}", c.chunk_id)));
            }
        }
        Ok(ChunkStore { chunks, by_id })
    }

    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    pub fn chunks(&self) -> &[Chunk] {
        &self.chunks
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Chunk> {
        self.chunks.iter()
    }

    pub fn get(&self, chunk_id: &str) -> Option<&Chunk> {
        self.by_id.get(chunk_id).map(|&i| &self.chunks[i])
    }

    pub fn position(&self, chunk_id: &str) -> Option<usize> {
        self.by_id.get(chunk_id).copied()
    }

    pub fn require(&self, chunk_id: &str) -> Result<&Chunk> {
        self.get(chunk_id)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown chunk_id {chunk_id:?}")))
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Out<'a> {
            chunk_id: &'a str,
            doc_id: &'a str,
            ordinal: usize,
            text: &'a str,
        }
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for c in &self.chunks {
            let rec = Out {
                chunk_id: &c.chunk_id,
                doc_id: &c.doc_id,
                ordinal: c.ordinal,
                text: &c.text,
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load_jsonl(path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct In {
            chunk_id: String,
            doc_id: String,
            ordinal: usize,
            text: String,
        }
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut chunks = Vec::new();
        for (idx, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: In = serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
                line: idx + 1,
                reason: e.to_string(),
            })?;
            let word_count = rec.text.split_whitespace().count();
            chunks.push(Chunk {
                chunk_id: rec.chunk_id,
                doc_id: rec.doc_id,
                ordinal: rec.ordinal,
                text: rec.text,
                word_count,
            });
        }
        Self::from_chunks(chunks)
    }
}

/// Greedy partition of each document's whitespace tokens into groups of
/// `chunk_size`; the trailing partial group is kept.
pub fn chunk_corpus(docs: &DocumentSet, chunk_size: usize) -> Result<ChunkStore> {
    if chunk_size == 0 {
        return Err(Error::InvalidArgument("chunk_size must be >= 1".into()));
    }
    let mut chunks = Vec::new();
    for doc in docs.iter() {
        let words: Vec<&str> = doc.text.split_whitespace().collect();
        if words.is_empty() {
            warn!("document {:?} has no words; skipped", doc.doc_id);
            continue;
        }
        for (ordinal, group) in words.chunks(chunk_size).enumerate() {
            chunks.push(Chunk {
                chunk_id: chunk_id(&doc.doc_id, ordinal),
                doc_id: doc.doc_id.clone(),
                ordinal,
                text: group.join(" "),
                word_count: group.len(),
            });
        }
    }
    ChunkStore::from_chunks(chunks)
}
