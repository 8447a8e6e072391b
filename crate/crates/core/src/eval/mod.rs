mod calibration;
mod metrics;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use calibration::{
    answer_uncertainty, calibration_eval, calibration_rows, default_taus, read_qa_records, tau_sweep, write_tau_csv,
    CalibrationConfig, CalibrationOutcome, CalibrationRow, CalibrationRows, QaRecord, TauPoint, UncertaintyMethod,
};
pub use metrics::{
    alignment, alignment_vectors, auroc, auroc_scores, f1_correctness, normalize, normalize_answer, pearson, rsa,
    uniformity, uniformity_vectors, CalibrationRecord,
};

use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::par::{self, Execution};

const REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleCounts {
    pub pairs: usize,
    pub chunks: usize,
    pub rsa_stimuli: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub version: u32,
    pub alignment: f64,
    pub uniformity: f64,
    /// Against the reference encoder, when one is given.
    pub rsa: Option<f64>,
    pub sample_counts: SampleCounts,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }
}

/// Alignment over positive pairs, uniformity over `chunks`, and RSA between
/// `encoder` and `reference` over the same chunks.
pub fn evaluate<S: AsRef<str> + Sync>(
    encoder: &dyn Encoder,
    pairs: &[(S, S)],
    chunks: &[S],
    reference: Option<&dyn Encoder>,
) -> Result<EvalReport> {
    let vectors = par::try_map(Execution::auto(), chunks, |t| encoder.embed(t.as_ref()))?;
    let uniformity = uniformity_vectors(&vectors, Execution::auto())?;
    let alignment = alignment(encoder, pairs)?;
    let rsa = match reference {
        Some(r) => {
            let other = par::try_map(Execution::auto(), chunks, |t| r.embed(t.as_ref()))?;
            Some(rsa(&vectors, &other)?)
        }
        None => None,
    };
    Ok(EvalReport {
        version: REPORT_VERSION,
        alignment,
        uniformity,
        rsa,
        sample_counts: SampleCounts {
            pairs: pairs.len(),
            chunks: chunks.len(),
            rsa_stimuli: if rsa.is_some() { chunks.len() } else { 0 },
        },
    })
}
