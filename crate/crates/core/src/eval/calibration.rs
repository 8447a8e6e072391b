//! Uncertainty calibration: generate an answer, grade it by F1 against the
//! gold answer, and measure how well an uncertainty score ranks correct
//! answers ahead of incorrect ones.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use log::warn;
use serde::{Deserialize, Serialize};

use super::metrics::{auroc, f1_correctness, CalibrationRecord};
use crate::error::{Error, Result};
use crate::par::{self, Execution};
use crate::provider::LogprobProvider;
use crate::uncertainty::{baseline_uncertainty, self_information_seq, span_uncertainty_si, BaselineMethod, SpanConfig};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaRecord {
    pub prompt: String,
    pub gold: String,
}

pub fn read_qa_records(path: &Path) -> Result<Vec<QaRecord>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: QaRecord = serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
            line: i + 1,
            reason: e.to_string(),
        })?;
        if rec.gold.trim().is_empty() {
            return Err(Error::MalformedRecord {
                line: i + 1,
                reason: "empty gold answer".into(),
            });
        }
        out.push(rec);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "method")]
pub enum UncertaintyMethod {
    Baseline(BaselineMethod),
    SnrSpan,
}

impl fmt::Display for UncertaintyMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            UncertaintyMethod::SnrSpan => "snr_span",
            UncertaintyMethod::Baseline(BaselineMethod::Minimum) => "minimum",
            UncertaintyMethod::Baseline(BaselineMethod::Average) => "average",
            UncertaintyMethod::Baseline(BaselineMethod::LogSum) => "log_sum",
            UncertaintyMethod::Baseline(BaselineMethod::Entropy) => "entropy",
            UncertaintyMethod::Baseline(BaselineMethod::SelfInformation) => "self_information",
        })
    }
}

impl FromStr for UncertaintyMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "snr_span" => UncertaintyMethod::SnrSpan,
            "minimum" => UncertaintyMethod::Baseline(BaselineMethod::Minimum),
            "average" => UncertaintyMethod::Baseline(BaselineMethod::Average),
            "log_sum" => UncertaintyMethod::Baseline(BaselineMethod::LogSum),
            "entropy" => UncertaintyMethod::Baseline(BaselineMethod::Entropy),
            "self_information" => UncertaintyMethod::Baseline(BaselineMethod::SelfInformation),
            other => return Err(Error::InvalidArgument(format!("unknown uncertainty method {other:?}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    pub method: UncertaintyMethod,
    pub tau: f64,
    pub span: SpanConfig,
    /// Score SU over the whole prompt+answer stream instead of the answer suffix.
    pub full_stream: bool,
    pub max_tokens: usize,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig {
            method: UncertaintyMethod::SnrSpan,
            tau: 0.5,
            span: SpanConfig::default(),
            full_stream: false,
            max_tokens: 32,
        }
    }
}

impl CalibrationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::Config(format!("tau must be in (0,1], got {}", self.tau)));
        }
        if self.max_tokens == 0 {
            return Err(Error::Config("max_tokens must be >= 1".into()));
        }
        self.span.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRow {
    pub index: usize,
    pub prediction: String,
    pub correctness: f64,
    pub uncertainty: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRows {
    pub rows: Vec<CalibrationRow>,
    pub skipped: usize,
}

impl CalibrationRows {
    pub fn records(&self, tau: f64) -> Vec<CalibrationRecord> {
        self.rows
            .iter()
            .map(|r| CalibrationRecord::new(r.uncertainty, r.correctness, tau))
            .collect()
    }
}

/// Uncertainty of generated answer tokens given the prompt-side tokens.
///
/// For `SnrSpan`, windows run over the prompt+answer stream; SU averages the
/// selected tokens that fall in the answer (or in the whole stream when
/// `full_stream`), falling back to the answer mean when none are selected.
pub fn answer_uncertainty(
    prompt_logprobs: &[f64],
    answer_logprobs: &[f64],
    method: UncertaintyMethod,
    span: &SpanConfig,
    full_stream: bool,
) -> Result<f64> {
    if answer_logprobs.is_empty() {
        return Err(Error::InvalidArgument("empty answer".into()));
    }
    match method {
        UncertaintyMethod::Baseline(m) => {
            let probs: Vec<f64> = answer_logprobs.iter().map(|lp| lp.exp()).collect();
            baseline_uncertainty(&probs, m)
        }
        UncertaintyMethod::SnrSpan => {
            let stream: Vec<f64> = prompt_logprobs.iter().chain(answer_logprobs).copied().collect();
            let si = self_information_seq(&stream)?;
            let res = span_uncertainty_si(&si, span)?;
            if full_stream {
                return Ok(res.su);
            }
            let start = prompt_logprobs.len();
            let mut mask = vec![false; si.len()];
            for w in res.windows.iter().filter(|w| w.selected) {
                mask[w.span.start.max(start)..w.span.end.max(start)]
                    .iter_mut()
                    .for_each(|m| *m = true);
            }
            let picked: Vec<f64> = si[start..]
                .iter()
                .zip(&mask[start..])
                .filter(|(_, &m)| m)
                .map(|(x, _)| *x)
                .collect();
            let pool = if picked.is_empty() { &si[start..] } else { &picked[..] };
            Ok(pool.iter().sum::<f64>() / pool.len() as f64)
        }
    }
}

/// Generate, grade and score every record. Failed generations are skipped and counted.
pub fn calibration_rows(
    provider: &dyn LogprobProvider,
    records: &[QaRecord],
    cfg: &CalibrationConfig,
) -> Result<CalibrationRows> {
    cfg.validate()?;
    let results = par::map(Execution::auto(), records, |r| -> Result<(String, f64)> {
        let generation = provider.generate(&r.prompt, cfg.max_tokens)?;
        let prompt_lp: Vec<f64> = generation
            .prompt_tokens
            .as_deref()
            .unwrap_or_default()
            .iter()
            .map(|t| t.logprob)
            .collect();
        let answer_lp: Vec<f64> = generation.answer_tokens.iter().map(|t| t.logprob).collect();
        let u = answer_uncertainty(&prompt_lp, &answer_lp, cfg.method, &cfg.span, cfg.full_stream)?;
        Ok((generation.text, u))
    });
    let mut rows = Vec::with_capacity(records.len());
    let mut skipped = 0;
    for (index, (rec, res)) in records.iter().zip(results).enumerate() {
        match res {
            Ok((prediction, uncertainty)) => rows.push(CalibrationRow {
                index,
                correctness: f1_correctness(&prediction, &rec.gold),
                prediction,
                uncertainty,
            }),
            Err(e) => {
                warn!("record {index}: {e}; skipped");
                skipped += 1;
            }
        }
    }
    Ok(CalibrationRows { rows, skipped })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationOutcome {
    pub auroc: f64,
    pub tau: f64,
    pub method: UncertaintyMethod,
    pub records: Vec<CalibrationRecord>,
    pub skipped: usize,
}

pub fn calibration_eval(
    provider: &dyn LogprobProvider,
    records: &[QaRecord],
    cfg: &CalibrationConfig,
) -> Result<CalibrationOutcome> {
    let rows = calibration_rows(provider, records, cfg)?;
    let recs = rows.records(cfg.tau);
    Ok(CalibrationOutcome {
        auroc: auroc(&recs)?,
        tau: cfg.tau,
        method: cfg.method,
        records: recs,
        skipped: rows.skipped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TauPoint {
    pub tau: f64,
    /// `None` when only one class is present at this threshold.
    pub auroc: Option<f64>,
    pub positives: usize,
    pub negatives: usize,
}

/// The default sweep 0.1, 0.2, …, 0.9.
pub fn default_taus() -> Vec<f64> {
    (1..=9).map(|i| f64::from(i) / 10.0).collect()
}

pub fn tau_sweep(rows: &CalibrationRows, taus: &[f64]) -> Vec<TauPoint> {
    taus.iter()
        .map(|&tau| {
            let recs = rows.records(tau);
            let positives = recs.iter().filter(|r| r.binary_label == 1).count();
            TauPoint {
                tau,
                auroc: auroc(&recs).ok(),
                positives,
                negatives: recs.len() - positives,
            }
        })
        .collect()
}

pub fn write_tau_csv(points: &[TauPoint], path: &Path) -> Result<()> {
    let mut out = String::from("tau,auroc,positives,negatives\n");
    for p in points {
        let a = p.auroc.map_or_else(|| "NA".to_string(), |a| format!("{a}"));
        out.push_str(&format!("{},{a},{},{}\n", p.tau, p.positives, p.negatives));
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}
