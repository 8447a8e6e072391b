use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Generation, LogprobProvider, ScoredPair, ScoredText, TokenScore};
use crate::error::ProviderError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CachedToken {
    pub t: String,
    pub lp: f64,
}

/// One line of the replay cache file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: String,
    pub tokens: Vec<CachedToken>,
    pub boundary_index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_tokens: Option<Vec<CachedToken>>,
}

fn sha_hex(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Cache key for scoring `prompt` under `model`.
pub fn cache_key(model: &str, prompt: &str) -> String {
    sha_hex(&[model.as_bytes(), prompt.as_bytes()])
}

pub fn generation_key(model: &str, prompt: &str, max_tokens: usize) -> String {
    sha_hex(&[
        b"generate",
        model.as_bytes(),
        &(max_tokens as u64).to_le_bytes(),
        prompt.as_bytes(),
    ])
}

fn to_cached(tokens: &[TokenScore]) -> Vec<CachedToken> {
    tokens
        .iter()
        .map(|t| CachedToken {
            t: t.token_text.clone(),
            lp: t.logprob,
        })
        .collect()
}

fn from_cached(tokens: &[CachedToken]) -> Vec<TokenScore> {
    tokens
        .iter()
        .enumerate()
        .map(|(position, c)| TokenScore {
            token_text: c.t.clone(),
            logprob: c.lp,
            position,
        })
        .collect()
}

/// Strict cache of provider responses. With an inner provider, misses are
/// forwarded and written through to the cache file; without one, a miss is
/// an error.
pub struct ReplayProvider {
    model: String,
    entries: RwLock<HashMap<String, CacheEntry>>,
    inner: Option<Box<dyn LogprobProvider>>,
    writer: Option<Mutex<BufWriter<File>>>,
    path: Option<PathBuf>,
}

impl std::fmt::Debug for ReplayProvider {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ReplayProvider")
            .field("model", &self.model)
            .field("entries", &self.len())
            .field("recording", &self.inner.is_some())
            .field("path", &self.path)
            .finish()
    }
}

impl ReplayProvider {
    pub fn from_entries(model: impl Into<String>, entries: Vec<CacheEntry>) -> Self {
        ReplayProvider {
            model: model.into(),
            entries: RwLock::new(entries.into_iter().map(|e| (e.key.clone(), e)).collect()),
            inner: None,
            writer: None,
            path: None,
        }
    }

    /// Open a cache file in strict replay mode.
    pub fn open(path: &Path, model: impl Into<String>) -> Result<Self, ProviderError> {
        let entries = load_entries(path)?;
        let mut p = Self::from_entries(model, entries);
        p.path = Some(path.to_path_buf());
        Ok(p)
    }

    /// Open (or create) a cache file and record misses from `inner`.
    pub fn recording(path: &Path, inner: Box<dyn LogprobProvider>) -> Result<Self, ProviderError> {
        let entries = if path.exists() { load_entries(path)? } else { Vec::new() };
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| ProviderError::CacheIo(format!("{}: {e}", path.display())))?;
        let model = inner.tag();
        Ok(ReplayProvider {
            model,
            entries: RwLock::new(entries.into_iter().map(|e| (e.key.clone(), e)).collect()),
            inner: Some(inner),
            writer: Some(Mutex::new(BufWriter::new(file))),
            path: Some(path.to_path_buf()),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn lookup(&self, key: &str) -> Option<CacheEntry> {
        self.entries.read().unwrap().get(key).cloned()
    }

    fn store(&self, entry: CacheEntry) -> Result<(), ProviderError> {
        if let Some(w) = &self.writer {
            let mut w = w.lock().unwrap();
            let line = serde_json::to_string(&entry).map_err(|e| ProviderError::CacheIo(e.to_string()))?;
            w.write_all(line.as_bytes())
                .and_then(|_| w.write_all(b"\n"))
                .and_then(|_| w.flush())
                .map_err(|e| ProviderError::CacheIo(e.to_string()))?;
        }
        self.entries.write().unwrap().insert(entry.key.clone(), entry);
        Ok(())
    }

    fn inner_or_miss(&self, key: &str) -> Result<&dyn LogprobProvider, ProviderError> {
        self.inner
            .as_deref()
            .ok_or_else(|| ProviderError::CacheMiss(key.to_string()))
    }
}

fn load_entries(path: &Path) -> Result<Vec<CacheEntry>, ProviderError> {
    let file = fs::File::open(path).map_err(|e| ProviderError::CacheIo(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| ProviderError::CacheIo(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: CacheEntry = serde_json::from_str(&line)
            .map_err(|e| ProviderError::CacheIo(format!("line {}: {e}", i + 1)))?;
        out.push(entry);
    }
    Ok(out)
}

impl LogprobProvider for ReplayProvider {
    fn tag(&self) -> String {
        self.model.clone()
    }

    fn score_text(&self, text: &str) -> Result<ScoredText, ProviderError> {
        let key = cache_key(&self.model, text);
        if let Some(e) = self.lookup(&key) {
            return Ok(ScoredText {
                tokens: from_cached(&e.tokens),
                offsets: None,
            });
        }
        let scored = self.inner_or_miss(&key)?.score_text(text)?;
        self.store(CacheEntry {
            key,
            tokens: to_cached(&scored.tokens),
            boundary_index: None,
            text: None,
            prompt_tokens: None,
        })?;
        Ok(scored)
    }

    fn score_concat(&self, first: &str, separator: &str, second: &str) -> Result<ScoredPair, ProviderError> {
        let text = format!("{first}{separator}{second}");
        let key = cache_key(&self.model, &text);
        if let Some(CacheEntry {
            tokens,
            boundary_index: Some(b),
            ..
        }) = self.lookup(&key)
        {
            return Ok(ScoredPair {
                tokens: from_cached(&tokens),
                boundary_index: b,
            });
        }
        let pair = self.inner_or_miss(&key)?.score_concat(first, separator, second)?;
        self.store(CacheEntry {
            key,
            tokens: to_cached(&pair.tokens),
            boundary_index: Some(pair.boundary_index),
            text: None,
            prompt_tokens: None,
        })?;
        Ok(pair)
    }

    fn generate(&self, prompt: &str, max_tokens: usize) -> Result<Generation, ProviderError> {
        let key = generation_key(&self.model, prompt, max_tokens);
        if let Some(e) = self.lookup(&key) {
            return Ok(Generation {
                text: e.text.unwrap_or_default(),
                answer_tokens: from_cached(&e.tokens),
                prompt_tokens: e.prompt_tokens.as_deref().map(from_cached),
            });
        }
        let g = self.inner_or_miss(&key)?.generate(prompt, max_tokens)?;
        self.store(CacheEntry {
            key,
            tokens: to_cached(&g.answer_tokens),
            boundary_index: None,
            text: Some(g.text.clone()),
            prompt_tokens: g.prompt_tokens.as_deref().map(to_cached),
        })?;
        Ok(g)
    }
}
