//! Planted-topic synthetic corpus for offline experiments.
//!
//! Every document belongs to one topic. Each word is drawn from the topic's
//! private vocabulary with probability `topic_fraction`, otherwise from a
//! shared Zipf-distributed background vocabulary.

use std::collections::BTreeMap;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Chunk, ChunkStore, Document, DocumentSet};
use crate::error::{Error, Result};
use crate::hashing::derive_seed;
use crate::retrieval::EmbedIndex;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub topics: usize,
    pub docs_per_topic: usize,
    pub words_per_doc: usize,
    pub topic_vocab: usize,
    pub shared_vocab: usize,
    pub topic_fraction: f64,
    pub zipf_exponent: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            topics: 10,
            docs_per_topic: 20,
            words_per_doc: 120,
            topic_vocab: 40,
            shared_vocab: 2000,
            topic_fraction: 0.2,
            zipf_exponent: 1.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.topics == 0 || self.docs_per_topic == 0 || self.words_per_doc == 0 {
            return Err(Error::Config("topics, docs_per_topic and words_per_doc must be >= 1".into()));
        }
        if self.topic_vocab == 0 || self.shared_vocab == 0 {
            return Err(Error::Config("vocabulary sizes must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.topic_fraction) {
            return Err(Error::Config(format!(
                "topic_fraction must be in [0,1], got {}",
                self.topic_fraction
            )));
        }
        Ok(())
    }
}

const ONSETS: [&str; 16] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "ch", "sh"];
const VOWELS: [&str; 6] = ["a", "e", "i", "o", "u", "ai"];

/// A pronounceable pseudo-word for `id`; distinct ids give distinct words.
fn pseudo_word(prefix: &str, mut id: usize) -> String {
    let mut w = String::from(prefix);
    loop {
        w.push_str(ONSETS[id % ONSETS.len()]);
        id /= ONSETS.len();
        w.push_str(VOWELS[id % VOWELS.len()]);
        id /= VOWELS.len();
        if id == 0 {
            break;
        }
        id -= 1;
    }
    w
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub documents: DocumentSet,
    /// Topic of each document id.
    pub topics: BTreeMap<String, usize>,
}

impl SynthCorpus {
    pub fn topic_of_chunk(&self, chunk: &Chunk) -> Option<usize> {
        self.topics.get(&chunk.doc_id).copied()
    }

    /// Mean fraction of each indexed chunk's `k` nearest neighbours (inner
    /// product, the chunk itself excluded) that share its topic.
    pub fn same_topic_precision(&self, index: &EmbedIndex, chunks: &ChunkStore, k: usize) -> Result<f64> {
        if k == 0 || index.len() <= k {
            return Err(Error::InvalidArgument(format!(
                "need k >= 1 and more than k indexed chunks (k={k}, n={})",
                index.len()
            )));
        }
        let topic = |id: &str| -> Result<usize> {
            let c = chunks.require(id)?;
            self.topic_of_chunk(c)
                .ok_or_else(|| Error::InvalidArgument(format!("chunk {id} has no planted topic")))
        };
        let mut total = 0.0;
        for (i, id) in index.chunk_ids().iter().enumerate() {
            let own = topic(id)?;
            let mut same = 0usize;
            for hit in index.search(index.row(i), k + 1)?.iter().filter(|h| &h.chunk_id != id).take(k) {
                same += usize::from(topic(&hit.chunk_id)? == own);
            }
            total += same as f64 / k as f64;
        }
        Ok(total / index.len() as f64)
    }
}

pub fn doc_id(topic: usize, index: usize) -> String {
    format!("t{topic:02}-d{index:03}")
}

pub fn generate_corpus(cfg: &SynthConfig) -> Result<SynthCorpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "synth"));
    let shared: Vec<String> = (0..cfg.shared_vocab).map(|i| pseudo_word("", i)).collect();
    let weights: Vec<f64> = (1..=cfg.shared_vocab)
        .map(|r| (r as f64).powf(-cfg.zipf_exponent))
        .collect();
    let zipf = WeightedIndex::new(&weights).map_err(|e| Error::Config(e.to_string()))?;
    let topic_words: Vec<Vec<String>> = (0..cfg.topics)
        .map(|t| (0..cfg.topic_vocab).map(|i| pseudo_word(&format!("q{t}"), i)).collect())
        .collect();
    let mut docs = Vec::with_capacity(cfg.topics * cfg.docs_per_topic);
    let mut topics = BTreeMap::new();
    for d in 0..cfg.docs_per_topic {
        for (t, vocab) in topic_words.iter().enumerate() {
            let words: Vec<&str> = (0..cfg.words_per_doc)
                .map(|_| {
                    if rng.gen::<f64>() < cfg.topic_fraction {
                        vocab[rng.gen_range(0..vocab.len())].as_str()
                    } else {
                        shared[zipf.sample(&mut rng)].as_str()
                    }
                })
                .collect();
            let id = doc_id(t, d);
            topics.insert(id.clone(), t);
            docs.push(Document {
                doc_id: id,
                text: words.join(" "),
                source_tag: format!("topic{t:02}"),
            });
        }
    }
    Ok(SynthCorpus {
        documents: DocumentSet::new(docs)?,
        topics,
    })
}
