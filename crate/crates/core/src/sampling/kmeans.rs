//! Seeded k-means++ over L2-normalized TF-IDF chunk vectors.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::ChunkStore;
use crate::error::{Error, Result};
use crate::hashing::derive_seed;
use crate::lexical_index::tokenize;
use crate::par::{self, Execution};

pub const MAX_ITERATIONS: usize = 50;
pub const DEFAULT_RESTARTS: usize = 10;

/// Sparse vector as sorted (term id, weight) pairs.
pub type SparseVec = Vec<(u32, f64)>;

/// Smoothed TF-IDF (`tf/len · (ln((1+N)/(1+df)) + 1)`), L2-normalized.
pub fn tfidf_vectors(chunks: &ChunkStore) -> (Vec<SparseVec>, usize) {
    let mut vocab: BTreeMap<String, u32> = BTreeMap::new();
    let mut counts: Vec<BTreeMap<u32, u32>> = Vec::with_capacity(chunks.len());
    for c in chunks.iter() {
        let mut m = BTreeMap::new();
        for t in tokenize(&c.text) {
            let next = vocab.len() as u32;
            let id = *vocab.entry(t).or_insert(next);
            *m.entry(id).or_insert(0) += 1;
        }
        counts.push(m);
    }
    let mut df = vec![0u32; vocab.len()];
    for m in &counts {
        for &id in m.keys() {
            df[id as usize] += 1;
        }
    }
    let n = chunks.len() as f64;
    let vectors = counts
        .into_iter()
        .map(|m| {
            let len: u32 = m.values().sum();
            let mut v: SparseVec = m
                .into_iter()
                .map(|(id, tf)| {
                    let idf = ((1.0 + n) / (1.0 + f64::from(df[id as usize]))).ln() + 1.0;
                    (id, f64::from(tf) / f64::from(len.max(1)) * idf)
                })
                .collect();
            let norm = v.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
            if norm > 0.0 {
                v.iter_mut().for_each(|(_, w)| *w /= norm);
            }
            v
        })
        .collect();
    (vectors, vocab.len())
}

fn sq_dist(x: &SparseVec, x_sq: f64, c: &[f64], c_sq: f64) -> f64 {
    let dot: f64 = x.iter().map(|&(i, w)| w * c[i as usize]).sum();
    (x_sq - 2.0 * dot + c_sq).max(0.0)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterAssignment {
    pub k: usize,
    pub chunk_ids: Vec<String>,
    pub labels: Vec<usize>,
}

impl ClusterAssignment {
    /// Member ids of cluster `c`, in corpus order.
    pub fn members(&self, c: usize) -> Vec<&str> {
        self.labels
            .iter()
            .zip(&self.chunk_ids)
            .filter(|(&l, _)| l == c)
            .map(|(_, id)| id.as_str())
            .collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        for &l in &self.labels {
            s[l] += 1;
        }
        s
    }

    pub fn label_of(&self, chunk_id: &str) -> Option<usize> {
        self.chunk_ids.iter().position(|c| c == chunk_id).map(|i| self.labels[i])
    }
}

pub fn cluster_chunks(chunks: &ChunkStore, k: usize, seed: u64) -> Result<ClusterAssignment> {
    cluster_chunks_with(chunks, k, seed, DEFAULT_RESTARTS, Execution::auto())
}

/// k-means++ seeded Lloyd iterations, repeated `restarts` times from one
/// seeded stream; the run with the lowest inertia wins (earliest on ties).
pub fn cluster_chunks_with(
    chunks: &ChunkStore,
    k: usize,
    seed: u64,
    restarts: usize,
    exec: Execution,
) -> Result<ClusterAssignment> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    if restarts == 0 {
        return Err(Error::InvalidArgument("restarts must be >= 1".into()));
    }
    if chunks.len() < k {
        return Err(Error::InvalidArgument(format!(
            "cannot form {k} clusters from {} chunks",
            chunks.len()
        )));
    }
    let (xs, dim) = tfidf_vectors(chunks);
    let x_sq: Vec<f64> = xs.iter().map(|v| v.iter().map(|(_, w)| w * w).sum()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "kmeans"));
    let mut best: Option<(Vec<usize>, f64)> = None;
    for _ in 0..restarts {
        let run = lloyd(&xs, &x_sq, dim, k, &mut rng, exec);
        if best.as_ref().is_none_or(|b| run.1 < b.1) {
            best = Some(run);
        }
    }
    let (labels, _) = best.expect("restarts >= 1");
    Ok(ClusterAssignment {
        k,
        chunk_ids: chunks.iter().map(|c| c.chunk_id.clone()).collect(),
        labels,
    })
}

/// One seeded run; returns labels and inertia.
fn lloyd(
    xs: &[SparseVec],
    x_sq: &[f64],
    dim: usize,
    k: usize,
    rng: &mut ChaCha8Rng,
    exec: Execution,
) -> (Vec<usize>, f64) {
    let dense = |v: &SparseVec| {
        let mut d = vec![0.0; dim];
        for &(i, w) in v {
            d[i as usize] = w;
        }
        d
    };
    // k-means++ seeding
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(dense(&xs[rng.gen_range(0..xs.len())]));
    let mut d2: Vec<f64> = vec![f64::INFINITY; xs.len()];
    while centroids.len() < k {
        let c = centroids.last().unwrap();
        let c_sq: f64 = c.iter().map(|w| w * w).sum();
        for (i, x) in xs.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(x, x_sq[i], c, c_sq));
        }
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.gen::<f64>() * total;
            let mut chosen = xs.len() - 1;
            for (i, &d) in d2.iter().enumerate() {
                if r < d {
                    chosen = i;
                    break;
                }
                r -= d;
            }
            chosen
        } else {
            rng.gen_range(0..xs.len())
        };
        centroids.push(dense(&xs[pick]));
    }

    let mut labels = vec![usize::MAX; xs.len()];
    for _ in 0..MAX_ITERATIONS {
        let c_sq: Vec<f64> = centroids.iter().map(|c| c.iter().map(|w| w * w).sum()).collect();
        let assigned: Vec<(usize, f64)> = par::map_range(exec, xs.len(), |i| {
            let mut best = (0, f64::INFINITY);
            for (j, c) in centroids.iter().enumerate() {
                let d = sq_dist(&xs[i], x_sq[i], c, c_sq[j]);
                if d < best.1 {
                    best = (j, d);
                }
            }
            best
        });
        let new_labels: Vec<usize> = assigned.iter().map(|a| a.0).collect();
        let changed = new_labels != labels;
        labels = new_labels;
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (x, &l) in xs.iter().zip(&labels) {
            counts[l] += 1;
            for &(i, w) in x {
                sums[l][i as usize] += w;
            }
        }
        for j in 0..k {
            if counts[j] == 0 {
                // reseed an empty cluster at the point farthest from its centroid
                let far = assigned
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1 .1.total_cmp(&b.1 .1).then(b.0.cmp(&a.0)))
                    .map(|(i, _)| i)
                    .unwrap();
                centroids[j] = dense(&xs[far]);
                labels[far] = j;
            } else {
                centroids[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
    }
    let c_sq: Vec<f64> = centroids.iter().map(|c| c.iter().map(|w| w * w).sum()).collect();
    let inertia = xs
        .iter()
        .zip(&labels)
        .enumerate()
        .map(|(i, (x, &l))| sq_dist(x, x_sq[i], &centroids[l], c_sq[l]))
        .sum();
    (labels, inertia)
}
