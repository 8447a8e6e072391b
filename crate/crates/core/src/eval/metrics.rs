use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::par::{self, Execution};

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::DegenerateEmbedding);
    }
    Ok(v.iter().map(|x| x / n).collect())
}

fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Mean squared distance between normalized embeddings of each pair.
pub fn alignment_vectors(pairs: &[(Vec<f64>, Vec<f64>)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("alignment needs at least one pair".into()));
    }
    let mut total = 0.0;
    for (x, y) in pairs {
        if x.len() != y.len() {
            return Err(Error::DimensionMismatch { left: x.len(), right: y.len() });
        }
        total += sq_dist(&normalize(x)?, &normalize(y)?);
    }
    Ok(total / pairs.len() as f64)
}

pub fn alignment<S: AsRef<str> + Sync>(encoder: &dyn Encoder, pairs: &[(S, S)]) -> Result<f64> {
    let vecs = par::try_map(Execution::auto(), pairs, |(a, b)| {
        Ok::<_, Error>((encoder.embed(a.as_ref())?, encoder.embed(b.as_ref())?))
    })?;
    alignment_vectors(&vecs)
}

/// `log mean_{x,y} exp(−2‖x−y‖²)` over all ordered pairs including self-pairs.
pub fn uniformity_vectors(vectors: &[Vec<f64>], exec: Execution) -> Result<f64> {
    if vectors.len() < 2 {
        return Err(Error::InvalidArgument("uniformity needs at least two embeddings".into()));
    }
    let unit = vectors.iter().map(|v| normalize(v)).collect::<Result<Vec<_>>>()?;
    let d = unit[0].len();
    if let Some(v) = unit.iter().find(|v| v.len() != d) {
        return Err(Error::DimensionMismatch { left: d, right: v.len() });
    }
    let rows = par::map_range(exec, unit.len(), |i| {
        unit.iter().map(|y| (-2.0 * sq_dist(&unit[i], y)).exp()).sum::<f64>()
    });
    let n = unit.len() as f64;
    Ok((rows.iter().sum::<f64>() / (n * n)).ln().min(0.0))
}

pub fn uniformity<S: AsRef<str> + Sync>(encoder: &dyn Encoder, texts: &[S]) -> Result<f64> {
    let vecs = par::try_map(Execution::auto(), texts, |t| encoder.embed(t.as_ref()))?;
    uniformity_vectors(&vecs, Execution::auto())
}

fn cosine_upper(m: &[Vec<f64>]) -> Result<Vec<f64>> {
    let unit = m.iter().map(|v| normalize(v)).collect::<Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(m.len() * (m.len() - 1) / 2);
    for i in 0..unit.len() {
        for j in i + 1..unit.len() {
            if unit[i].len() != unit[j].len() {
                return Err(Error::DimensionMismatch {
                    left: unit[i].len(),
                    right: unit[j].len(),
                });
            }
            out.push(unit[i].iter().zip(&unit[j]).map(|(a, b)| a * b).sum());
        }
    }
    Ok(out)
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch { left: x.len(), right: y.len() });
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::ZeroVariance);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Pearson correlation of the i<j cosine-similarity entries of two spaces.
pub fn rsa(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch { left: a.len(), right: b.len() });
    }
    if a.len() < 3 {
        return Err(Error::InvalidArgument("rsa needs at least 3 stimuli".into()));
    }
    pearson(&cosine_upper(a)?, &cosine_upper(b)?)
}

/// Lowercase, strip ASCII punctuation, drop the articles a/an/the, split on whitespace.
pub fn normalize_answer(s: &str) -> Vec<String> {
    let cleaned: String = s
        .to_lowercase()
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect();
    cleaned
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .map(str::to_string)
        .collect()
}

/// Token-level F1 between normalized prediction and gold.
pub fn f1_correctness(prediction: &str, gold: &str) -> f64 {
    let p = normalize_answer(prediction);
    let g = normalize_answer(gold);
    if p.is_empty() || g.is_empty() {
        return if p == g { 1.0 } else { 0.0 };
    }
    let mut counts: HashMap<&str, i64> = HashMap::new();
    for t in &g {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0;
    for t in &p {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / p.len() as f64;
    let recall = common as f64 / g.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRecord {
    pub uncertainty: f64,
    pub correctness: f64,
    pub binary_label: u8,
}

impl CalibrationRecord {
    pub fn new(uncertainty: f64, correctness: f64, tau: f64) -> Self {
        CalibrationRecord {
            uncertainty,
            correctness,
            binary_label: u8::from(correctness >= tau),
        }
    }
}

/// Area under the ROC curve of `scores` for label 1, by the rank-sum (Mann-Whitney U)
/// statistic with tied ranks averaged.
pub fn auroc_scores(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            left: scores.len(),
            right: labels.len(),
        });
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::AurocUndefined("only one class present"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidArgument("NaN score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// AUROC with −uncertainty as the score for a correct answer.
pub fn auroc(records: &[CalibrationRecord]) -> Result<f64> {
    let scores: Vec<f64> = records.iter().map(|r| -r.uncertainty).collect();
    let labels: Vec<bool> = records.iter().map(|r| r.binary_label == 1).collect();
    auroc_scores(&scores, &labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn alignment_cases() {
        let v = vec![1.0, 2.0];
        assert_eq!(alignment_vectors(&[(v.clone(), v.clone())]).unwrap(), 0.0);
        assert_relative_eq!(
            alignment_vectors(&[(vec![1.0, 0.0], vec![0.0, 3.0])]).unwrap(),
            2.0,
            epsilon = 1e-12
        );
        assert!(matches!(
            alignment_vectors(&[(vec![0.0, 0.0], vec![1.0, 0.0])]),
            Err(Error::DegenerateEmbedding)
        ));
    }

    #[test]
    fn uniformity_cases() {
        let same = vec![vec![1.0, 1.0]; 4];
        assert_eq!(uniformity_vectors(&same, Execution::Sequential).unwrap(), 0.0);
        let anti = vec![vec![1.0, 0.0], vec![-1.0, 0.0]];
        assert_relative_eq!(
            uniformity_vectors(&anti, Execution::Parallel).unwrap(),
            (0.5 + 0.5 * (-8.0f64).exp()).ln(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn rsa_self_and_scaled() {
        let a = vec![vec![1.0, 0.2, 0.0], vec![0.3, 1.0, 0.5], vec![0.0, 0.1, 1.0], vec![0.7, 0.7, 0.1]];
        assert_relative_eq!(rsa(&a, &a).unwrap(), 1.0, epsilon = 1e-12);
        let b: Vec<Vec<f64>> = a.iter().map(|v| v.iter().map(|x| 2.0 * x).collect()).collect();
        assert_relative_eq!(rsa(&a, &b).unwrap(), 1.0, epsilon = 1e-12);
        let flat = vec![vec![1.0, 0.0]; 3];
        assert!(matches!(rsa(&flat, &flat), Err(Error::ZeroVariance)));
    }

    #[test]
    fn f1_cases() {
        assert_eq!(f1_correctness("Paris", "paris"), 1.0);
        assert_eq!(f1_correctness("London", "Paris"), 0.0);
        assert_eq!(f1_correctness("the cat", "cat"), 1.0);
        assert_relative_eq!(f1_correctness("big red cat", "red cat"), 0.8, epsilon = 1e-12);
    }

    #[test]
    fn auroc_cases() {
        let recs: Vec<_> = [(0.1, 1.0), (0.2, 1.0), (0.9, 0.0), (0.8, 0.0)]
            .iter()
            .map(|&(u, c)| CalibrationRecord::new(u, c, 0.5))
            .collect();
        assert_eq!(auroc(&recs).unwrap(), 1.0);
        let tied: Vec<_> = [1.0, 0.0, 1.0, 0.0]
            .iter()
            .map(|&c| CalibrationRecord::new(0.3, c, 0.5))
            .collect();
        assert_eq!(auroc(&tied).unwrap(), 0.5);
        let one: Vec<_> = [1.0, 1.0].iter().map(|&c| CalibrationRecord::new(0.3, c, 0.5)).collect();
        assert!(matches!(auroc(&one), Err(Error::AurocUndefined(_))));
    }
}
