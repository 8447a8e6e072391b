//! Token self-information, sliding-window SNR and SNR-gated span uncertainty.
//!
//! For a token stream with self-information I_0..I_{n-1}, windows of
//! `window_len` tokens start every `stride` tokens. A window's SNR is its mean
//! self-information divided by its population variance; windows with
//! SNR < σ are selected, and span uncertainty is the mean self-information
//! over the union of selected token positions (overlaps counted once).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::{self, Execution};
use crate::provider::PairScoreRecord;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpanConfig {
    pub window_len: usize,
    pub stride: usize,
    pub sigma: f64,
}

impl Default for SpanConfig {
    fn default() -> Self {
        SpanConfig {
            window_len: 20,
            stride: 10,
            sigma: 2.0,
        }
    }
}

impl SpanConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_len == 0 || self.stride == 0 {
            return Err(Error::Config("span window_len and stride must be >= 1".into()));
        }
        if self.stride > self.window_len {
            return Err(Error::Config(format!(
                "span stride ({}) must be <= window_len ({})",
                self.stride, self.window_len
            )));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::Config(format!("span sigma must be > 0, got {}", self.sigma)));
        }
        Ok(())
    }
}

/// Half-open token interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowStats {
    pub span: Span,
    pub mean_si: f64,
    pub var_si: f64,
    /// `+∞` when the window has zero variance.
    pub snr: f64,
    pub selected: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    #[default]
    SnrSpan,
    AllChunking,
    PreciseChunking,
}

impl std::str::FromStr for ScoreMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "snr_span" => Ok(ScoreMode::SnrSpan),
            "all_chunking" => Ok(ScoreMode::AllChunking),
            "precise_chunking" => Ok(ScoreMode::PreciseChunking),
            _ => Err(Error::InvalidArgument(format!("unknown score mode {s:?}"))),
        }
    }
}

impl std::fmt::Display for ScoreMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ScoreMode::SnrSpan => "snr_span",
            ScoreMode::AllChunking => "all_chunking",
            ScoreMode::PreciseChunking => "precise_chunking",
        })
    }
}

/// Scored pair, persisted one per line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairScore {
    pub anchor_id: String,
    pub candidate_id: String,
    pub mode: ScoreMode,
    pub su: f64,
    pub selected_token_count: usize,
    /// Set when no window qualified and the all-token mean was used.
    pub fallback: bool,
}

pub fn self_information(logprob: f64) -> Result<f64> {
    if logprob > 0.0 {
        return Err(Error::ProbabilityExceedsOne(logprob));
    }
    if logprob.is_nan() {
        return Err(Error::DegenerateProbability);
    }
    Ok(-logprob)
}

pub fn self_information_seq(logprobs: &[f64]) -> Result<Vec<f64>> {
    logprobs.iter().map(|&lp| self_information(lp)).collect()
}

pub fn enumerate_windows(seq_len: usize, cfg: &SpanConfig) -> Vec<Span> {
    if seq_len == 0 {
        return Vec::new();
    }
    if seq_len < cfg.window_len {
        return vec![Span { start: 0, end: seq_len }];
    }
    (0..=seq_len - cfg.window_len)
        .step_by(cfg.stride.max(1))
        .map(|start| Span {
            start,
            end: start + cfg.window_len,
        })
        .collect()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn window_snr(self_info: &[f64], span: Span, sigma: f64) -> WindowStats {
    let xs = &self_info[span.start..span.end];
    let mean_si = mean(xs);
    let var_si = xs.iter().map(|x| (x - mean_si).powi(2)).sum::<f64>() / xs.len() as f64;
    let snr = if var_si > 0.0 { mean_si / var_si } else { f64::INFINITY };
    WindowStats {
        span,
        mean_si,
        var_si,
        snr,
        selected: snr < sigma,
    }
}

/// Per-window statistics over a whole stream.
pub fn snr_trace(self_info: &[f64], cfg: &SpanConfig) -> Vec<WindowStats> {
    enumerate_windows(self_info.len(), cfg)
        .into_iter()
        .map(|s| window_snr(self_info, s, cfg.sigma))
        .collect()
}

/// Span uncertainty over a raw self-information stream.
#[derive(Debug, Clone, PartialEq)]
pub struct SpanResult {
    pub su: f64,
    pub selected_token_count: usize,
    pub fallback: bool,
    pub windows: Vec<WindowStats>,
}

pub fn span_uncertainty_si(self_info: &[f64], cfg: &SpanConfig) -> Result<SpanResult> {
    if self_info.is_empty() {
        return Err(Error::InvalidArgument("span uncertainty needs at least one token".into()));
    }
    let windows = snr_trace(self_info, cfg);
    let mut mask = vec![false; self_info.len()];
    for w in windows.iter().filter(|w| w.selected) {
        mask[w.span.start..w.span.end].iter_mut().for_each(|m| *m = true);
    }
    let (sum, count) = self_info
        .iter()
        .zip(&mask)
        .filter(|(_, &m)| m)
        .fold((0.0, 0usize), |(s, c), (x, _)| (s + x, c + 1));
    if count == 0 {
        return Ok(SpanResult {
            su: mean(self_info),
            selected_token_count: 0,
            fallback: true,
            windows,
        });
    }
    Ok(SpanResult {
        su: sum / count as f64,
        selected_token_count: count,
        fallback: false,
        windows,
    })
}

pub fn span_uncertainty(record: &PairScoreRecord, cfg: &SpanConfig) -> Result<PairScore> {
    let si = self_information_seq(&record.logprobs())?;
    let r = span_uncertainty_si(&si, cfg)?;
    Ok(PairScore {
        anchor_id: record.anchor_id.clone(),
        candidate_id: record.candidate_id.clone(),
        mode: ScoreMode::SnrSpan,
        su: r.su,
        selected_token_count: r.selected_token_count,
        fallback: r.fallback,
    })
}

pub fn all_chunking_score(record: &PairScoreRecord) -> Result<PairScore> {
    let si = self_information_seq(&record.logprobs())?;
    if si.is_empty() {
        return Err(Error::InvalidArgument("record has no tokens".into()));
    }
    Ok(PairScore {
        anchor_id: record.anchor_id.clone(),
        candidate_id: record.candidate_id.clone(),
        mode: ScoreMode::AllChunking,
        su: mean(&si),
        selected_token_count: si.len(),
        fallback: false,
    })
}

pub fn precise_chunking_score(record: &PairScoreRecord) -> Result<PairScore> {
    let n = record.tokens.len();
    if record.boundary_index >= n {
        return Err(Error::EmptySecondChunk);
    }
    let si = self_information_seq(&record.logprobs()[record.boundary_index..])?;
    Ok(PairScore {
        anchor_id: record.anchor_id.clone(),
        candidate_id: record.candidate_id.clone(),
        mode: ScoreMode::PreciseChunking,
        su: mean(&si),
        selected_token_count: si.len(),
        fallback: false,
    })
}

pub fn score_record(record: &PairScoreRecord, mode: ScoreMode, cfg: &SpanConfig) -> Result<PairScore> {
    match mode {
        ScoreMode::SnrSpan => span_uncertainty(record, cfg),
        ScoreMode::AllChunking => all_chunking_score(record),
        ScoreMode::PreciseChunking => precise_chunking_score(record),
    }
}

pub fn score_records(
    records: &[PairScoreRecord],
    mode: ScoreMode,
    cfg: &SpanConfig,
    exec: Execution,
) -> Result<Vec<PairScore>> {
    par::try_map(exec, records, |r| score_record(r, mode, cfg))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMethod {
    Minimum,
    Average,
    LogSum,
    Entropy,
    SelfInformation,
}

impl BaselineMethod {
    pub const ALL: [BaselineMethod; 5] = [
        BaselineMethod::Minimum,
        BaselineMethod::Average,
        BaselineMethod::LogSum,
        BaselineMethod::Entropy,
        BaselineMethod::SelfInformation,
    ];
}

/// Sequence-level uncertainty from realized token probabilities.
///
/// `self_information` is the mean per-token self-information. `entropy` sums
/// over realized tokens only, since providers do not return full
/// next-token distributions.
pub fn baseline_uncertainty(probs: &[f64], method: BaselineMethod) -> Result<f64> {
    if probs.is_empty() {
        return Err(Error::InvalidArgument("empty probability list".into()));
    }
    for &p in probs {
        if p > 1.0 {
            return Err(Error::ProbabilityExceedsOne(p.ln()));
        }
        if !(p > 0.0) {
            return Err(Error::DegenerateProbability);
        }
    }
    let n = probs.len() as f64;
    Ok(match method {
        BaselineMethod::Minimum => -probs.iter().copied().fold(f64::INFINITY, f64::min).ln(),
        BaselineMethod::Average => -(probs.iter().sum::<f64>() / n).ln(),
        BaselineMethod::LogSum => -probs.iter().map(|p| p.ln()).sum::<f64>(),
        BaselineMethod::Entropy => -probs.iter().map(|p| p * p.ln()).sum::<f64>(),
        BaselineMethod::SelfInformation => -probs.iter().map(|p| p.ln()).sum::<f64>() / n,
    })
}
