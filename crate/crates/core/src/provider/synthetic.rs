use serde::{Deserialize, Serialize};

use super::{Generation, LogprobProvider, ScoredText, TokenScore};
use crate::error::ProviderError;
use crate::hashing::StableHasher;

/// Optional context-recall behaviour: a word already seen earlier in the
/// sequence is usually predicted confidently, with occasional surprises.
/// This mimics an LM that has "understood" related preceding context.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecallRegime {
    /// Probability that a recalled word lands in the confident band.
    pub confident_prob: f64,
    /// Self-information band `[lo, lo + span)` for confident recalls.
    pub confident_lo: f64,
    pub confident_span: f64,
    /// Self-information band for surprising recalls.
    pub surprise_lo: f64,
    pub surprise_span: f64,
}

impl Default for RecallRegime {
    fn default() -> Self {
        RecallRegime {
            confident_prob: 0.8,
            confident_lo: 0.02,
            confident_span: 0.1,
            surprise_lo: 1.0,
            surprise_span: 2.0,
        }
    }
}

/// Word-level deterministic provider.
///
/// Without a recall regime, token `i` gets `logprob = −(1 + 4u)` where `u` is
/// a seeded hash of (seed, token, position, preceding token) mapped to [0,1).
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticProvider {
    seed: u64,
    recall: Option<RecallRegime>,
    answer_words: usize,
}

impl SyntheticProvider {
    pub fn new(seed: u64) -> Self {
        SyntheticProvider {
            seed,
            recall: None,
            answer_words: 3,
        }
    }

    pub fn with_recall(mut self, regime: RecallRegime) -> Self {
        self.recall = Some(regime);
        self
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn word_offsets(text: &str) -> Vec<(usize, &str)> {
        let mut out = Vec::new();
        let mut start = None;
        for (i, ch) in text.char_indices() {
            if ch.is_whitespace() {
                if let Some(s) = start.take() {
                    out.push((s, &text[s..i]));
                }
            } else if start.is_none() {
                start = Some(i);
            }
        }
        if let Some(s) = start {
            out.push((s, &text[s..]));
        }
        out
    }

    /// Logprobs for `words`, each conditioned on all earlier words.
    fn logprobs(&self, words: &[&str]) -> Vec<f64> {
        let mut seen = std::collections::HashSet::new();
        let mut out = Vec::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            let prev = if i == 0 { "" } else { words[i - 1] };
            let u = StableHasher::new()
                .u64(self.seed)
                .str(w)
                .u64(i as u64)
                .str(prev)
                .unit();
            let lower = w.to_lowercase();
            let si = match &self.recall {
                Some(r) if seen.contains(&lower) => {
                    let v = StableHasher::new()
                        .u64(self.seed)
                        .str("recall")
                        .str(w)
                        .u64(i as u64)
                        .str(prev)
                        .unit();
                    if v < r.confident_prob {
                        r.confident_lo + r.confident_span * u
                    } else {
                        r.surprise_lo + r.surprise_span * u
                    }
                }
                _ => 1.0 + 4.0 * u,
            };
            seen.insert(lower);
            out.push(-si);
        }
        out
    }

    fn to_tokens(words: &[&str], logprobs: &[f64], first_position: usize) -> Vec<TokenScore> {
        words
            .iter()
            .zip(logprobs)
            .enumerate()
            .map(|(i, (w, &lp))| TokenScore {
                token_text: (*w).to_string(),
                logprob: lp,
                position: first_position + i,
            })
            .collect()
    }
}

impl LogprobProvider for SyntheticProvider {
    fn tag(&self) -> String {
        match self.recall {
            Some(_) => format!("synthetic:seed={}:recall", self.seed),
            None => format!("synthetic:seed={}", self.seed),
        }
    }

    fn score_text(&self, text: &str) -> Result<ScoredText, ProviderError> {
        let spans = Self::word_offsets(text);
        if spans.is_empty() {
            return Err(ProviderError::EmptyText);
        }
        let words: Vec<&str> = spans.iter().map(|s| s.1).collect();
        let lps = self.logprobs(&words);
        Ok(ScoredText {
            tokens: Self::to_tokens(&words, &lps, 0),
            offsets: Some(spans.iter().map(|s| s.0).collect()),
        })
    }

    /// Copies a short hashed span of the prompt as the answer.
    fn generate(&self, prompt: &str, max_tokens: usize) -> Result<Generation, ProviderError> {
        let prompt_words: Vec<&str> = prompt.split_whitespace().collect();
        if prompt_words.is_empty() {
            return Err(ProviderError::EmptyText);
        }
        let n = self.answer_words.min(max_tokens).max(1);
        let start = (StableHasher::new().u64(self.seed).str("generate").str(prompt).finish()
            % prompt_words.len() as u64) as usize;
        let answer: Vec<&str> = prompt_words[start..].iter().take(n).copied().collect();
        let mut all = prompt_words.clone();
        all.extend(answer.iter().copied());
        let lps = self.logprobs(&all);
        let p = prompt_words.len();
        Ok(Generation {
            text: answer.join(" "),
            answer_tokens: Self::to_tokens(&answer, &lps[p..], 0),
            prompt_tokens: Some(Self::to_tokens(&prompt_words, &lps[..p], 0)),
        })
    }
}
