//! Contrastive triplet construction.
//!
//! Chunks are clustered, anchors and candidate pools are drawn per cluster,
//! candidates are prefiltered by BM25 against the anchor, the top-M are scored
//! by span uncertainty, and one positive / one hard negative are drawn from
//! the m lowest / m highest uncertainty candidates.

mod checkpoint;
mod kmeans;

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use log::warn;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CheckpointLine};
pub use kmeans::{cluster_chunks, cluster_chunks_with, tfidf_vectors, ClusterAssignment, SparseVec, DEFAULT_RESTARTS};

use crate::corpus::ChunkStore;
use crate::error::{Error, Result};
use crate::hashing::derive_seed;
use crate::lexical_index::Bm25Index;
use crate::par::{self, Execution};
use crate::provider::{score_pair, LogprobProvider, DEFAULT_SEPARATOR};
use crate::uncertainty::{score_record, ScoreMode, SpanConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    pub k_clusters: usize,
    /// k-means runs; the lowest-inertia clustering is kept.
    pub kmeans_restarts: usize,
    pub anchors_per_cluster: usize,
    pub candidates_per_cluster: usize,
    pub prefilter_n: usize,
    pub scored_m: usize,
    pub window_m: usize,
    /// Candidate sampling rounds; each round emits one triplet per anchor.
    pub rounds: usize,
    pub seed: u64,
    pub mode: ScoreMode,
    pub separator: String,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            k_clusters: 10,
            kmeans_restarts: DEFAULT_RESTARTS,
            anchors_per_cluster: 8,
            candidates_per_cluster: 100,
            prefilter_n: 100,
            scored_m: 20,
            window_m: 3,
            rounds: 1,
            seed: 0,
            mode: ScoreMode::SnrSpan,
            separator: DEFAULT_SEPARATOR.to_string(),
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        let c = |msg: String| Err(Error::Config(msg));
        if self.k_clusters == 0 || self.anchors_per_cluster == 0 || self.candidates_per_cluster == 0 {
            return c("k_clusters, anchors_per_cluster and candidates_per_cluster must be >= 1".into());
        }
        if self.kmeans_restarts == 0 {
            return c("kmeans_restarts must be >= 1".into());
        }
        if self.window_m == 0 {
            return c("window_m (m) must be >= 1".into());
        }
        if 2 * self.window_m > self.scored_m {
            return c(format!(
                "2*m <= M violated: m = {}, M = {}",
                self.window_m, self.scored_m
            ));
        }
        if self.scored_m > self.prefilter_n {
            return c(format!(
                "M <= N violated: M = {}, N = {}",
                self.scored_m, self.prefilter_n
            ));
        }
        if self.rounds == 0 {
            return c("rounds must be >= 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Triplet {
    pub anchor_id: String,
    pub positive_id: String,
    pub negative_id: String,
    pub positive_su: f64,
    pub negative_su: f64,
    pub mode: ScoreMode,
    pub round: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Sampled {
    pub ids: Vec<String>,
    pub warnings: Vec<String>,
}

fn draw_per_cluster(assignment: &ClusterAssignment, per_cluster: usize, rng: &mut ChaCha8Rng, what: &str) -> Sampled {
    let mut out = Sampled::default();
    for c in 0..assignment.k {
        let members = assignment.members(c);
        if members.len() < per_cluster {
            let msg = format!(
                "cluster {c} has {} members, fewer than the {per_cluster} {what} requested; taking all",
                members.len()
            );
            warn!("{msg}");
            out.warnings.push(msg);
            out.ids.extend(members.iter().map(|s| s.to_string()));
            continue;
        }
        let mut picked = sample(rng, members.len(), per_cluster).into_vec();
        picked.sort_unstable();
        out.ids.extend(picked.into_iter().map(|i| members[i].to_string()));
    }
    out
}

/// `c` anchors per cluster, uniformly without replacement.
pub fn sample_anchors(assignment: &ClusterAssignment, c: usize, seed: u64) -> Sampled {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "anchors"));
    draw_per_cluster(assignment, c, &mut rng, "anchors")
}

/// `n` candidates per cluster for one sampling round. Each round draws from
/// its own derived seed, so repeated rounds grow the positive/negative pool.
pub fn sample_candidates(assignment: &ClusterAssignment, n: usize, seed: u64, round: usize) -> Sampled {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("candidates/{round}")));
    draw_per_cluster(assignment, n, &mut rng, "candidates")
}

/// BM25 candidates for one anchor: positive-score members of `candidates`,
/// ranked descending (ties by id), cut to N and then to M.
pub fn prefilter(
    index: &Bm25Index,
    positions: &HashMap<&str, usize>,
    anchor_id: &str,
    anchor_text: &str,
    candidates: &[String],
    cfg: &SamplingConfig,
) -> Vec<(String, f64)> {
    let scores = index.score_all(anchor_text);
    let mut seen = BTreeSet::new();
    let mut ranked: Vec<(String, f64)> = candidates
        .iter()
        .filter(|c| c.as_str() != anchor_id && seen.insert(c.as_str()))
        .filter_map(|c| positions.get(c.as_str()).map(|&p| (c.clone(), scores[p])))
        .filter(|(_, s)| *s > 0.0)
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(cfg.prefilter_n);
    ranked.truncate(cfg.scored_m);
    ranked
}

/// Given (candidate, su) for one anchor, pick positive from the m lowest-SU
/// and negative from the m highest-SU candidates. Returns `None` when fewer
/// than 2m candidates are available.
pub fn select_pair(
    scored: &[(String, f64)],
    m: usize,
    rng: &mut impl Rng,
) -> Option<((String, f64), (String, f64))> {
    if scored.len() < 2 * m || m == 0 {
        return None;
    }
    let mut ranked = scored.to_vec();
    ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
    let pos = ranked[rng.gen_range(0..m)].clone();
    let neg = ranked[ranked.len() - m + rng.gen_range(0..m)].clone();
    Some((pos, neg))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TripletBuild {
    pub triplets: Vec<Triplet>,
    pub warnings: Vec<String>,
    pub skipped_anchors: Vec<String>,
    /// Pairs sent to the provider in this call (excluding checkpoint hits).
    pub scored_pairs: usize,
}

/// One round of triplet construction.
#[allow(clippy::too_many_arguments)]
pub fn build_triplets(
    anchors: &[String],
    candidates: &[String],
    chunks: &ChunkStore,
    index: &Bm25Index,
    provider: &dyn LogprobProvider,
    cfg: &SamplingConfig,
    span: &SpanConfig,
    round: usize,
    checkpoint: &Checkpoint,
) -> Result<TripletBuild> {
    build_triplets_with(
        anchors,
        candidates,
        chunks,
        index,
        provider,
        cfg,
        span,
        round,
        checkpoint,
        Execution::auto(),
    )
}

#[allow(clippy::too_many_arguments)]
pub fn build_triplets_with(
    anchors: &[String],
    candidates: &[String],
    chunks: &ChunkStore,
    index: &Bm25Index,
    provider: &dyn LogprobProvider,
    cfg: &SamplingConfig,
    span: &SpanConfig,
    round: usize,
    checkpoint: &Checkpoint,
    exec: Execution,
) -> Result<TripletBuild> {
    cfg.validate()?;
    span.validate()?;
    let positions: HashMap<&str, usize> = index
        .chunk_ids()
        .iter()
        .enumerate()
        .map(|(i, c)| (c.as_str(), i))
        .collect();

    let shortlists: Vec<Vec<(String, f64)>> = par::try_map(exec, anchors, |a| {
        let chunk = chunks.require(a)?;
        Ok::<_, Error>(prefilter(index, &positions, a, &chunk.text, candidates, cfg))
    })?;

    let mut out = TripletBuild::default();
    let mut todo: Vec<(String, String)> = Vec::new();
    let mut queued = BTreeSet::new();
    for (a, list) in anchors.iter().zip(&shortlists) {
        if list.len() < 2 * cfg.window_m {
            continue;
        }
        for (c, _) in list {
            if checkpoint.get(a, c).is_none() && queued.insert((a.clone(), c.clone())) {
                todo.push((a.clone(), c.clone()));
            }
        }
    }
    out.scored_pairs = todo.len();
    let results: Vec<Result<()>> = par::map(exec, &todo, |(a, c)| {
        let rec = score_pair(provider, chunks.require(a)?, chunks.require(c)?, &cfg.separator)?;
        let s = score_record(&rec, cfg.mode, span)?;
        checkpoint.record(a, c, s.su)
    });
    results.into_iter().collect::<Result<Vec<()>>>()?;

    for (a, list) in anchors.iter().zip(&shortlists) {
        if list.len() < 2 * cfg.window_m {
            let msg = format!(
                "anchor {a}: {} BM25 candidates, need at least {}; skipped",
                list.len(),
                2 * cfg.window_m
            );
            warn!("{msg}");
            out.warnings.push(msg);
            out.skipped_anchors.push(a.clone());
            continue;
        }
        let scored: Vec<(String, f64)> = list
            .iter()
            .map(|(c, _)| (c.clone(), checkpoint.get(a, c).expect("scored above")))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("triplet/{round}/{a}")));
        let ((pid, psu), (nid, nsu)) = select_pair(&scored, cfg.window_m, &mut rng).expect("length checked");
        out.triplets.push(Triplet {
            anchor_id: a.clone(),
            positive_id: pid,
            negative_id: nid,
            positive_su: psu,
            negative_su: nsu,
            mode: cfg.mode,
            round,
        });
    }
    Ok(out)
}

/// Full dataset: cluster, draw anchors, then `cfg.rounds` candidate rounds.
pub struct DatasetBuild {
    pub assignment: ClusterAssignment,
    pub anchors: Vec<String>,
    pub triplets: Vec<Triplet>,
    pub warnings: Vec<String>,
}

pub fn build_dataset(
    chunks: &ChunkStore,
    index: &Bm25Index,
    provider: &dyn LogprobProvider,
    cfg: &SamplingConfig,
    span: &SpanConfig,
    checkpoint: &Checkpoint,
) -> Result<DatasetBuild> {
    cfg.validate()?;
    let assignment = cluster_chunks_with(chunks, cfg.k_clusters, cfg.seed, cfg.kmeans_restarts, Execution::auto())?;
    let anchors = sample_anchors(&assignment, cfg.anchors_per_cluster, cfg.seed);
    let mut warnings = anchors.warnings.clone();
    let mut triplets = Vec::new();
    for round in 0..cfg.rounds {
        let cands = sample_candidates(&assignment, cfg.candidates_per_cluster, cfg.seed, round);
        warnings.extend(cands.warnings);
        let built = build_triplets(
            &anchors.ids,
            &cands.ids,
            chunks,
            index,
            provider,
            cfg,
            span,
            round,
            checkpoint,
        )?;
        warnings.extend(built.warnings);
        triplets.extend(built.triplets);
    }
    Ok(DatasetBuild {
        assignment,
        anchors: anchors.ids,
        triplets,
        warnings,
    })
}

pub fn write_triplets(triplets: &[Triplet], path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for t in triplets {
        serde_json::to_writer(&mut w, t)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_triplets(path: &Path) -> Result<Vec<Triplet>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
            line: i + 1,
            reason: e.to_string(),
        })?);
    }
    Ok(out)
}
