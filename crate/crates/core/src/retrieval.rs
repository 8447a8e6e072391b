//! Exact inner-product retrieval over encoder embeddings and prompt assembly.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::binio::Reader;
use crate::corpus::{Chunk, ChunkStore};
use crate::encoder::{Encoder, EncoderModel};
use crate::error::{Error, Result};
use crate::par::{self, Execution};

pub const DEFAULT_TOP_M: usize = 30;

const MAGIC: &[u8; 8] = b"URAGIDX\0";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbedIndex {
    chunk_ids: Vec<String>,
    dim: usize,
    /// Row-major `[chunk_ids.len() × dim]`.
    vectors: Vec<f64>,
    model_fingerprint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub chunk_id: String,
    pub score: f64,
}

pub fn build_embedding_index(model: &EncoderModel, chunks: &ChunkStore) -> Result<EmbedIndex> {
    build_embedding_index_with(model, chunks, Execution::auto())
}

pub fn build_embedding_index_with(model: &EncoderModel, chunks: &ChunkStore, exec: Execution) -> Result<EmbedIndex> {
    if chunks.is_empty() {
        return Err(Error::NothingToIndex);
    }
    let rows = par::try_map(exec, chunks.chunks(), |c: &Chunk| model.embed(&c.text))?;
    let dim = model.dim();
    Ok(EmbedIndex {
        chunk_ids: chunks.iter().map(|c| c.chunk_id.clone()).collect(),
        dim,
        vectors: rows.into_iter().flatten().collect(),
        model_fingerprint: model.fingerprint(),
    })
}

impl EmbedIndex {
    pub fn len(&self) -> usize {
        self.chunk_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunk_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn chunk_ids(&self) -> &[String] {
        &self.chunk_ids
    }

    pub fn model_fingerprint(&self) -> &str {
        &self.model_fingerprint
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.vectors.chunks_exact(self.dim)
    }

    pub fn vector(&self, chunk_id: &str) -> Option<&[f64]> {
        self.chunk_ids.iter().position(|c| c == chunk_id).map(|i| self.row(i))
    }

    /// Top-`m` rows by inner product with `query`; ties by ascending chunk id.
    pub fn search(&self, query: &[f64], m: usize) -> Result<Vec<Hit>> {
        self.search_with(query, m, Execution::auto())
    }

    pub fn search_with(&self, query: &[f64], m: usize, exec: Execution) -> Result<Vec<Hit>> {
        if m == 0 {
            return Err(Error::InvalidArgument("m must be >= 1".into()));
        }
        if query.len() != self.dim {
            return Err(Error::DimensionMismatch {
                left: self.dim,
                right: query.len(),
            });
        }
        let scores = par::map_range(exec, self.len(), |i| {
            self.row(i).iter().zip(query).map(|(a, b)| a * b).sum::<f64>()
        });
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| {
            scores[b]
                .total_cmp(&scores[a])
                .then_with(|| self.chunk_ids[a].cmp(&self.chunk_ids[b]))
        });
        order.truncate(m);
        Ok(order
            .into_iter()
            .map(|i| Hit {
                chunk_id: self.chunk_ids[i].clone(),
                score: scores[i],
            })
            .collect())
    }

    pub fn retrieve(&self, encoder: &dyn Encoder, query: &str, m: usize) -> Result<Vec<Hit>> {
        self.search(&encoder.embed(query)?, m)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + 8 * self.vectors.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let put_str = |out: &mut Vec<u8>, s: &str| {
            out.extend_from_slice(&(s.len() as u64).to_le_bytes());
            out.extend_from_slice(s.as_bytes());
        };
        put_str(&mut out, &self.model_fingerprint);
        out.extend_from_slice(&(self.chunk_ids.len() as u64).to_le_bytes());
        out.extend_from_slice(&(self.dim as u64).to_le_bytes());
        for id in &self.chunk_ids {
            put_str(&mut out, id);
        }
        for v in &self.vectors {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(8)? != MAGIC {
            return Err(Error::Format("not an embedding index file".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported index version {version}")));
        }
        let get_str = |r: &mut Reader<'_>| -> Result<String> {
            let n = r.u64()? as usize;
            String::from_utf8(r.take(n)?.to_vec()).map_err(|_| Error::Format("non-UTF-8 string".into()))
        };
        let model_fingerprint = get_str(&mut r)?;
        let n = r.u64()? as usize;
        let dim = r.u64()? as usize;
        let chunk_ids = (0..n).map(|_| get_str(&mut r)).collect::<Result<Vec<_>>>()?;
        let vectors = r.f64s(n.checked_mul(dim).ok_or_else(|| Error::Format("size overflow".into()))?)?;
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes in index file".into()));
        }
        Ok(EmbedIndex {
            chunk_ids,
            dim,
            vectors,
            model_fingerprint,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskTag {
    /// 2WikiMultihopQA and MuSiQue style multi-hop QA.
    MultihopQa,
    Trec,
    Samsum,
    Triviaqa,
}

impl TaskTag {
    pub const ALL: [TaskTag; 4] = [TaskTag::MultihopQa, TaskTag::Trec, TaskTag::Samsum, TaskTag::Triviaqa];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskTag::MultihopQa => "multihop_qa",
            TaskTag::Trec => "trec",
            TaskTag::Samsum => "samsum",
            TaskTag::Triviaqa => "triviaqa",
        }
    }

    fn builtin_text(self) -> &'static str {
        match self {
            TaskTag::MultihopQa => include_str!("../templates/multihop_qa.txt"),
            TaskTag::Trec => include_str!("../templates/trec.txt"),
            TaskTag::Samsum => include_str!("../templates/samsum.txt"),
            TaskTag::Triviaqa => include_str!("../templates/triviaqa.txt"),
        }
    }
}

impl fmt::Display for TaskTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskTag::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown task tag {s:?}")))
    }
}

pub const PROMPT_SLOT: &str = "{Prompt}";
pub const QUESTION_SLOT: &str = "{Question}";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    task: TaskTag,
    text: String,
    prompt_at: usize,
    question_at: usize,
}

fn single_slot(text: &str, slot: &str) -> Result<usize> {
    let mut hits = text.match_indices(slot);
    match (hits.next(), hits.next()) {
        (Some((i, _)), None) => Ok(i),
        (None, _) => Err(Error::Template(format!("missing slot {slot}"))),
        _ => Err(Error::Template(format!("slot {slot} appears more than once"))),
    }
}

impl PromptTemplate {
    pub fn new(task: TaskTag, text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        let prompt_at = single_slot(&text, PROMPT_SLOT)?;
        let question_at = single_slot(&text, QUESTION_SLOT)?;
        Ok(PromptTemplate {
            task,
            text,
            prompt_at,
            question_at,
        })
    }

    pub fn builtin(task: TaskTag) -> Self {
        Self::new(task, task.builtin_text()).expect("bundled templates are valid")
    }

    pub fn load(task: TaskTag, path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::new(task, text)
    }

    pub fn task(&self) -> TaskTag {
        self.task
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    /// Fill both slots. Slot text is inserted verbatim and never re-scanned.
    pub fn fill(&self, prompt: &str, question: &str) -> String {
        let mut slots = [
            (self.prompt_at, PROMPT_SLOT.len(), prompt),
            (self.question_at, QUESTION_SLOT.len(), question),
        ];
        slots.sort_by_key(|s| s.0);
        let mut out = String::with_capacity(self.text.len() + prompt.len() + question.len());
        let mut pos = 0;
        for (at, len, value) in slots {
            out.push_str(&self.text[pos..at]);
            out.push_str(value);
            pos = at + len;
        }
        out.push_str(&self.text[pos..]);
        out
    }
}

/// Chunks joined by newlines in rank order go into `{Prompt}`.
pub fn assemble_prompt<S: AsRef<str>>(template: &PromptTemplate, chunks: &[S], question: &str) -> String {
    if chunks.is_empty() {
        warn!("assembling a prompt with no retrieved chunks");
    }
    let joined = chunks.iter().map(|c| c.as_ref()).collect::<Vec<_>>().join("\n");
    template.fill(&joined, question)
}
