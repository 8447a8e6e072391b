//! Per-token log-probabilities of text under a causal language model.
//!
//! Three backends share the [`LogprobProvider`] trait: [`HttpProvider`]
//! (completions-style JSON endpoint with `echo` + `logprobs`),
//! [`ReplayProvider`] (a JSONL cache that can wrap another provider), and
//! [`SyntheticProvider`] (deterministic, offline).

mod http;
mod replay;
mod synthetic;

use serde::{Deserialize, Serialize};

use crate::corpus::Chunk;
use crate::error::{Error, ProviderError, Result};

pub use http::{HttpConfig, HttpProvider};
pub use replay::{cache_key, generation_key, CacheEntry, CachedToken, ReplayProvider};
pub use synthetic::{RecallRegime, SyntheticProvider};

/// Logprob recorded for a first token the backend leaves unscored.
pub const FIRST_TOKEN_FLOOR: f64 = -20.0;
/// Inserted between the two chunks of a scored pair.
pub const DEFAULT_SEPARATOR: &str = " ";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenScore {
    pub token_text: String,
    pub logprob: f64,
    pub position: usize,
}

/// Tokens of one scored string. `offsets[i]` is the byte offset where token
/// `i` starts in the scored text, when the backend reports it.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredText {
    pub tokens: Vec<TokenScore>,
    pub offsets: Option<Vec<usize>>,
}

/// A scored concatenation `first + separator + second`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredPair {
    pub tokens: Vec<TokenScore>,
    pub boundary_index: usize,
}

/// Output of a generation call; `answer_tokens` are conditioned on the prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub text: String,
    pub answer_tokens: Vec<TokenScore>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_tokens: Option<Vec<TokenScore>>,
}

pub trait LogprobProvider: Send + Sync {
    /// Recorded in every [`PairScoreRecord`] this provider produces.
    fn tag(&self) -> String;

    fn score_text(&self, text: &str) -> Result<ScoredText, ProviderError>;

    fn generate(&self, prompt: &str, max_tokens: usize) -> Result<Generation, ProviderError>;

    /// Score `first + separator + second` and locate the first token of `second`.
    fn score_concat(
        &self,
        first: &str,
        separator: &str,
        second: &str,
    ) -> Result<ScoredPair, ProviderError> {
        let text = format!("{first}{separator}{second}");
        let scored = self.score_text(&text)?;
        let boundary_index = resolve_boundary(&text, &scored, first.len(), first.len() + separator.len())?;
        Ok(ScoredPair {
            tokens: scored.tokens,
            boundary_index,
        })
    }
}

impl<P: LogprobProvider + ?Sized> LogprobProvider for Box<P> {
    fn tag(&self) -> String {
        (**self).tag()
    }
    fn score_text(&self, text: &str) -> Result<ScoredText, ProviderError> {
        (**self).score_text(text)
    }
    fn generate(&self, prompt: &str, max_tokens: usize) -> Result<Generation, ProviderError> {
        (**self).generate(prompt, max_tokens)
    }
    fn score_concat(&self, a: &str, sep: &str, b: &str) -> Result<ScoredPair, ProviderError> {
        (**self).score_concat(a, sep, b)
    }
}

impl<P: LogprobProvider + ?Sized> LogprobProvider for std::sync::Arc<P> {
    fn tag(&self) -> String {
        (**self).tag()
    }
    fn score_text(&self, text: &str) -> Result<ScoredText, ProviderError> {
        (**self).score_text(text)
    }
    fn generate(&self, prompt: &str, max_tokens: usize) -> Result<Generation, ProviderError> {
        (**self).generate(prompt, max_tokens)
    }
    fn score_concat(&self, a: &str, sep: &str, b: &str) -> Result<ScoredPair, ProviderError> {
        (**self).score_concat(a, sep, b)
    }
}

/// Boundary = first token starting at or after the end of the first chunk
/// (a token that begins inside the separator belongs to the second chunk).
/// A token that starts before `first_end` and reaches past `second_start`
/// spans both chunks and makes the boundary ambiguous.
pub(crate) fn resolve_boundary(
    text: &str,
    scored: &ScoredText,
    first_end: usize,
    second_start: usize,
) -> Result<usize, ProviderError> {
    let offsets = match &scored.offsets {
        Some(o) => {
            if o.len() != scored.tokens.len() {
                return Err(ProviderError::AmbiguousBoundary(
                    "offset count does not match token count".into(),
                ));
            }
            o.clone()
        }
        None => {
            let mut offsets = Vec::with_capacity(scored.tokens.len());
            let mut pos = 0;
            for t in &scored.tokens {
                offsets.push(pos);
                pos += t.token_text.len();
            }
            if pos != text.len() {
                return Err(ProviderError::AmbiguousBoundary(
                    "token texts do not reassemble the prompt and no offsets were reported".into(),
                ));
            }
            offsets
        }
    };
    let n = scored.tokens.len();
    let boundary = offsets
        .iter()
        .position(|&o| o >= first_end)
        .ok_or_else(|| ProviderError::AmbiguousBoundary("no token starts in the second chunk".into()))?;
    if boundary == 0 || boundary >= n {
        return Err(ProviderError::AmbiguousBoundary(format!(
            "boundary {boundary} outside (0, {n})"
        )));
    }
    let prev_start = offsets[boundary - 1];
    let prev_end = prev_start + scored.tokens[boundary - 1].token_text.len();
    if prev_start < first_end && prev_end > second_start {
        return Err(ProviderError::AmbiguousBoundary(format!(
            "token {:?} spans both chunks",
            scored.tokens[boundary - 1].token_text
        )));
    }
    Ok(boundary)
}

fn validate_tokens(tokens: &[TokenScore]) -> Result<(), ProviderError> {
    if tokens.is_empty() {
        return Err(ProviderError::Protocol("backend returned 0 tokens".into()));
    }
    for (i, t) in tokens.iter().enumerate() {
        if t.position != i {
            return Err(ProviderError::Protocol(format!(
                "token positions not contiguous at {i}"
            )));
        }
        if !(t.logprob <= 0.0) {
            return Err(ProviderError::Protocol(format!(
                "logprob {} at position {i} is not <= 0",
                t.logprob
            )));
        }
    }
    Ok(())
}

/// Per-token scores of `text`, in order.
pub fn score_tokens(provider: &dyn LogprobProvider, text: &str) -> Result<Vec<TokenScore>> {
    if text.is_empty() {
        return Err(ProviderError::EmptyText.into());
    }
    let scored = provider.score_text(text)?;
    validate_tokens(&scored.tokens)?;
    Ok(scored.tokens)
}

/// The concatenated token stream of an (anchor, candidate) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairScoreRecord {
    pub anchor_id: String,
    pub candidate_id: String,
    pub tokens: Vec<TokenScore>,
    pub boundary_index: usize,
    pub provider_tag: String,
}

impl PairScoreRecord {
    pub fn new(
        anchor_id: impl Into<String>,
        candidate_id: impl Into<String>,
        tokens: Vec<TokenScore>,
        boundary_index: usize,
        provider_tag: impl Into<String>,
    ) -> Result<Self> {
        if tokens.iter().enumerate().any(|(i, t)| t.position != i) {
            return Err(Error::InvalidArgument("token positions must be contiguous from 0".into()));
        }
        if boundary_index == 0 || boundary_index >= tokens.len() {
            return Err(Error::InvalidArgument(format!(
                "boundary_index {boundary_index} must lie in (0, {})",
                tokens.len()
            )));
        }
        Ok(PairScoreRecord {
            anchor_id: anchor_id.into(),
            candidate_id: candidate_id.into(),
            tokens,
            boundary_index,
            provider_tag: provider_tag.into(),
        })
    }

    /// Test and replay helper: build a record straight from logprobs.
    pub fn from_logprobs(
        anchor_id: &str,
        candidate_id: &str,
        logprobs: &[f64],
        boundary_index: usize,
    ) -> Result<Self> {
        let tokens = logprobs
            .iter()
            .enumerate()
            .map(|(position, &logprob)| TokenScore {
                token_text: format!("t{position}"),
                logprob,
                position,
            })
            .collect();
        Self::new(anchor_id, candidate_id, tokens, boundary_index, "literal")
    }

    pub fn logprobs(&self) -> Vec<f64> {
        self.tokens.iter().map(|t| t.logprob).collect()
    }
}

pub fn score_pair(
    provider: &dyn LogprobProvider,
    a: &Chunk,
    b: &Chunk,
    separator: &str,
) -> Result<PairScoreRecord> {
    if a.text.is_empty() || b.text.is_empty() {
        return Err(ProviderError::EmptyText.into());
    }
    let pair = provider.score_concat(&a.text, separator, &b.text)?;
    validate_tokens(&pair.tokens)?;
    PairScoreRecord::new(
        &a.chunk_id,
        &b.chunk_id,
        pair.tokens,
        pair.boundary_index,
        provider.tag(),
    )
}
