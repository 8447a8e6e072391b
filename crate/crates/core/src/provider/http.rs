use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::Deserialize;
use serde_json::json;

use super::{Generation, LogprobProvider, ScoredText, TokenScore, FIRST_TOKEN_FLOOR};
use crate::error::ProviderError;

pub const ENV_API_URL: &str = "URAG_API_URL";
pub const ENV_API_KEY: &str = "URAG_API_KEY";

#[derive(Debug, Clone, PartialEq)]
pub struct HttpConfig {
    /// Full URL of the completions endpoint.
    pub url: String,
    pub model: String,
    pub api_key: Option<String>,
    pub max_in_flight: usize,
    pub attempts: usize,
    pub initial_backoff: Duration,
    pub timeout: Duration,
    pub first_token_floor: f64,
}

impl HttpConfig {
    pub fn new(url: impl Into<String>, model: impl Into<String>) -> Self {
        HttpConfig {
            url: url.into(),
            model: model.into(),
            api_key: None,
            max_in_flight: 4,
            attempts: 3,
            initial_backoff: Duration::from_millis(500),
            timeout: Duration::from_secs(120),
            first_token_floor: FIRST_TOKEN_FLOOR,
        }
    }

    /// Fill url and key from `URAG_API_URL` / `URAG_API_KEY` when unset.
    pub fn with_env(mut self) -> Self {
        if self.url.is_empty() {
            if let Ok(u) = std::env::var(ENV_API_URL) {
                self.url = u;
            }
        }
        if self.api_key.is_none() {
            self.api_key = std::env::var(ENV_API_KEY).ok();
        }
        self
    }
}

/// Counting semaphore bounding concurrent requests.
#[derive(Debug)]
struct Gate {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Gate {
    fn new(n: usize) -> Self {
        Gate {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> GateGuard<'_> {
        let mut free = self.free.lock().unwrap();
        while *free == 0 {
            free = self.cv.wait(free).unwrap();
        }
        *free -= 1;
        GateGuard(self)
    }
}

struct GateGuard<'a>(&'a Gate);

impl Drop for GateGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap() += 1;
        self.0.cv.notify_one();
    }
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    #[serde(default)]
    text: String,
    logprobs: Option<Logprobs>,
}

#[derive(Deserialize)]
struct Logprobs {
    tokens: Vec<String>,
    token_logprobs: Vec<Option<f64>>,
    #[serde(default)]
    text_offset: Option<Vec<usize>>,
}

/// Client for a completions-style endpoint:
/// `POST {prompt, max_tokens, echo, logprobs: 1}` answered with
/// `choices[0].logprobs.{tokens, token_logprobs[, text_offset]}`.
#[derive(Debug)]
pub struct HttpProvider {
    cfg: HttpConfig,
    agent: ureq::Agent,
    gate: Gate,
}

enum Failure {
    Retryable(String),
    Fatal(ProviderError),
}

impl HttpProvider {
    pub fn new(cfg: HttpConfig) -> Result<Self, ProviderError> {
        if cfg.url.is_empty() {
            return Err(ProviderError::Protocol(format!(
                "no endpoint configured (set {ENV_API_URL})"
            )));
        }
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(cfg.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let gate = Gate::new(cfg.max_in_flight);
        Ok(HttpProvider { cfg, agent, gate })
    }

    pub fn config(&self) -> &HttpConfig {
        &self.cfg
    }

    fn post_once(&self, body: &serde_json::Value) -> Result<CompletionResponse, Failure> {
        let _slot = self.gate.acquire();
        let mut req = self.agent.post(&self.cfg.url);
        if let Some(key) = &self.cfg.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(body)
            .map_err(|e| Failure::Retryable(e.to_string()))?;
        let status = resp.status().as_u16();
        if status >= 500 || status == 429 {
            return Err(Failure::Retryable(format!("HTTP {status}")));
        }
        if status >= 400 {
            let text = resp.body_mut().read_to_string().unwrap_or_default();
            return Err(Failure::Fatal(ProviderError::Protocol(format!("HTTP {status}: {text}"))));
        }
        resp.body_mut()
            .read_json::<CompletionResponse>()
            .map_err(|e| Failure::Fatal(ProviderError::Protocol(format!("bad response body: {e}"))))
    }

    fn post(&self, body: serde_json::Value) -> Result<CompletionResponse, ProviderError> {
        let attempts = self.cfg.attempts.max(1);
        let mut backoff = self.cfg.initial_backoff;
        let mut last = String::new();
        for attempt in 0..attempts {
            match self.post_once(&body) {
                Ok(r) => return Ok(r),
                Err(Failure::Fatal(e)) => return Err(e),
                Err(Failure::Retryable(msg)) => {
                    log::warn!("request attempt {} failed: {msg}", attempt + 1);
                    last = msg;
                    if attempt + 1 < attempts {
                        std::thread::sleep(backoff);
                        backoff *= 2;
                    }
                }
            }
        }
        Err(ProviderError::Transport {
            attempts,
            message: last,
        })
    }

    fn tokens_from(&self, lp: Logprobs) -> Result<(Vec<TokenScore>, Option<Vec<usize>>), ProviderError> {
        if lp.tokens.len() != lp.token_logprobs.len() {
            return Err(ProviderError::Protocol(format!(
                "{} tokens but {} logprobs",
                lp.tokens.len(),
                lp.token_logprobs.len()
            )));
        }
        if lp.tokens.is_empty() {
            return Err(ProviderError::Protocol("backend returned 0 tokens".into()));
        }
        let mut out = Vec::with_capacity(lp.tokens.len());
        for (position, (t, l)) in lp.tokens.into_iter().zip(lp.token_logprobs).enumerate() {
            let logprob = match l {
                Some(v) => v,
                None if position == 0 => self.cfg.first_token_floor,
                None => {
                    return Err(ProviderError::Protocol(format!(
                        "null logprob at position {position}"
                    )))
                }
            };
            out.push(TokenScore {
                token_text: t,
                logprob,
                position,
            });
        }
        Ok((out, lp.text_offset))
    }
}

fn first_logprobs(resp: CompletionResponse) -> Result<(String, Logprobs), ProviderError> {
    let choice = resp
        .choices
        .into_iter()
        .next()
        .ok_or_else(|| ProviderError::Protocol("response has no choices".into()))?;
    let lp = choice
        .logprobs
        .ok_or_else(|| ProviderError::Protocol("response has no logprobs".into()))?;
    Ok((choice.text, lp))
}

impl LogprobProvider for HttpProvider {
    fn tag(&self) -> String {
        self.cfg.model.clone()
    }

    fn score_text(&self, text: &str) -> Result<ScoredText, ProviderError> {
        if text.is_empty() {
            return Err(ProviderError::EmptyText);
        }
        let body = json!({
            "model": self.cfg.model,
            "prompt": text,
            "max_tokens": 0,
            "echo": true,
            "logprobs": 1,
        });
        let (_, lp) = first_logprobs(self.post(body)?)?;
        let (tokens, offsets) = self.tokens_from(lp)?;
        Ok(ScoredText { tokens, offsets })
    }

    fn generate(&self, prompt: &str, max_tokens: usize) -> Result<Generation, ProviderError> {
        let body = json!({
            "model": self.cfg.model,
            "prompt": prompt,
            "max_tokens": max_tokens,
            "echo": false,
            "logprobs": 1,
            "temperature": 0,
        });
        let (text, lp) = first_logprobs(self.post(body)?)?;
        let (answer_tokens, _) = self.tokens_from(lp)?;
        Ok(Generation {
            text,
            answer_tokens,
            prompt_tokens: None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_url_is_rejected() {
        let cfg = HttpConfig::new("", "m");
        assert!(HttpProvider::new(cfg).is_err());
    }

    #[test]
    fn gate_bounds_concurrency() {
        use std::sync::atomic::{AtomicUsize, Ordering};
        use std::sync::Arc;
        let gate = Arc::new(Gate::new(2));
        let active = Arc::new(AtomicUsize::new(0));
        let peak = Arc::new(AtomicUsize::new(0));
        let handles: Vec<_> = (0..8)
            .map(|_| {
                let (gate, active, peak) = (gate.clone(), active.clone(), peak.clone());
                std::thread::spawn(move || {
                    let _g = gate.acquire();
                    let now = active.fetch_add(1, Ordering::SeqCst) + 1;
                    peak.fetch_max(now, Ordering::SeqCst);
                    std::thread::sleep(Duration::from_millis(10));
                    active.fetch_sub(1, Ordering::SeqCst);
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        assert!(peak.load(Ordering::SeqCst) <= 2);
    }
}
