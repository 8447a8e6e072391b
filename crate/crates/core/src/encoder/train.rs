use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{accumulate_batch, GradBuffer, TextTriplet, TripletBags};
use super::model::{BagOfBuckets, EncoderConfig, EncoderModel};
use crate::corpus::ChunkStore;
use crate::error::{Error, Result};
use crate::hashing::derive_seed;
use crate::sampling::Triplet;

const REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_fraction: f64,
    pub epochs: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            learning_rate: 1e-5,
            warmup_fraction: 0.1,
            epochs: 1,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let c = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return c("batch_size must be >= 1".into());
        }
        // 0 is tolerated for the identity check; negative or NaN is not
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return c(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return c(format!("warmup_fraction must be in [0,1], got {}", self.warmup_fraction));
        }
        if self.epochs == 0 {
            return c("epochs must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return c("optimizer betas must be in [0,1) and eps > 0".into());
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n_triplets: usize) -> usize {
        n_triplets.div_ceil(self.batch_size)
    }
}

/// Linear warmup over the first `warmup_fraction` of steps, then linear decay to 0.
/// `step` is 0-based.
pub fn learning_rate_at(cfg: &TrainConfig, step: usize, total_steps: usize) -> f64 {
    let warmup = (cfg.warmup_fraction * total_steps as f64).ceil() as usize;
    let s = step as f64;
    if step < warmup {
        cfg.learning_rate * (s + 1.0) / warmup as f64
    } else {
        let rest = (total_steps - warmup) as f64;
        cfg.learning_rate * ((total_steps as f64 - s) / rest).max(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub batches: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub version: u32,
    pub triplets: usize,
    pub total_steps: usize,
    pub epochs: Vec<EpochStats>,
    pub model_fingerprint: String,
}

impl TrainReport {
    pub fn first_loss(&self) -> Option<f64> {
        self.epochs.first().map(|e| e.mean_loss)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.mean_loss)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }
}

/// Adam state. Token-table moments are updated only for rows present in the
/// batch; projection and bias moments are updated every step.
struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m_table: Vec<f64>,
    v_table: Vec<f64>,
    m_proj: Vec<f64>,
    v_proj: Vec<f64>,
    m_bias: Vec<f64>,
    v_bias: Vec<f64>,
}

impl Adam {
    fn new(model: &EncoderModel, cfg: &TrainConfig) -> Self {
        Adam {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            t: 0,
            m_table: vec![0.0; model.token_table.len()],
            v_table: vec![0.0; model.token_table.len()],
            m_proj: vec![0.0; model.projection.len()],
            v_proj: vec![0.0; model.projection.len()],
            m_bias: vec![0.0; model.bias.len()],
            v_bias: vec![0.0; model.bias.len()],
        }
    }

    fn step(&mut self, model: &mut EncoderModel, g: &GradBuffer, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let (step, inv_c2) = (lr / c1, 1.0 / c2);
        let update = |p: &mut [f64], m: &mut [f64], v: &mut [f64], grad: &[f64]| {
            for (((p, m), v), g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(grad) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= step * *m / ((*v * inv_c2).sqrt() + eps);
            }
        };
        let e = model.cfg.embed_dim;
        for &row in &g.touched {
            let r = row * e..(row + 1) * e;
            update(
                &mut model.token_table[r.clone()],
                &mut self.m_table[r.clone()],
                &mut self.v_table[r],
                g.row(row),
            );
        }
        update(&mut model.projection, &mut self.m_proj, &mut self.v_proj, &g.projection);
        update(&mut model.bias, &mut self.m_bias, &mut self.v_bias, &g.bias);
    }
}

/// Train a freshly initialized encoder.
pub fn train(
    triplets: &[TextTriplet],
    encoder: EncoderConfig,
    cfg: &TrainConfig,
) -> Result<(EncoderModel, TrainReport)> {
    let model = EncoderModel::new(encoder, derive_seed(cfg.seed, "encoder"))?;
    train_from(model, triplets, cfg)
}

/// Continue training `model`. Single-threaded and deterministic given `cfg.seed`.
pub fn train_from(
    mut model: EncoderModel,
    triplets: &[TextTriplet],
    cfg: &TrainConfig,
) -> Result<(EncoderModel, TrainReport)> {
    cfg.validate()?;
    if triplets.is_empty() {
        return Err(Error::InvalidArgument("training needs at least one triplet".into()));
    }
    let per_epoch = cfg.steps_per_epoch(triplets.len());
    let total = per_epoch * cfg.epochs;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "shuffle"));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "dropout"));
    let mut bags: Vec<[BagOfBuckets; 3]> = triplets
        .iter()
        .map(|t| [model.bag(&t.anchor), model.bag(&t.positive), model.bag(&t.negative)])
        .collect();
    // Rows outside the training vocabulary never receive gradient, so train on
    // a compact copy of the used rows for locality and scatter them back after.
    let mut used: Vec<usize> = bags.iter().flatten().flatten().map(|&(b, _)| b).collect();
    used.sort_unstable();
    used.dedup();
    for (b, _) in bags.iter_mut().flatten().flatten() {
        *b = used.binary_search(b).expect("bucket collected above");
    }
    let e = model.cfg.embed_dim;
    let vocab = model.cfg.vocab_hash_dim;
    let full_table = std::mem::take(&mut model.token_table);
    model.token_table = used.iter().flat_map(|&r| &full_table[r * e..(r + 1) * e]).copied().collect();
    model.cfg.vocab_hash_dim = used.len();
    let mut adam = Adam::new(&model, cfg);
    let mut grads = GradBuffer::new(&model);
    let mut order: Vec<usize> = (0..triplets.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut sum = 0.0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<TripletBags<'_>> = idx
                .iter()
                .map(|&i| {
                    let [a, p, n] = &bags[i];
                    [&a[..], &p[..], &n[..]]
                })
                .collect();
            grads.clear();
            let loss = accumulate_batch(&model, &batch, Some(&mut dropout_rng), &mut grads)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step: b,
                    value: loss,
                });
            }
            sum += loss;
            adam.step(&mut model, &grads, learning_rate_at(cfg, step, total));
            step += 1;
        }
        let mean_loss = sum / per_epoch as f64;
        info!("epoch {epoch}: mean loss {mean_loss:.6}");
        epochs.push(EpochStats {
            epoch,
            mean_loss,
            batches: per_epoch,
        });
    }
    let compact = std::mem::replace(&mut model.token_table, full_table);
    for (k, &r) in used.iter().enumerate() {
        model.token_table[r * e..(r + 1) * e].copy_from_slice(&compact[k * e..(k + 1) * e]);
    }
    model.cfg.vocab_hash_dim = vocab;
    if !model.all_finite() {
        return Err(Error::NonFiniteLoss {
            epoch: cfg.epochs - 1,
            step: per_epoch,
            value: f64::NAN,
        });
    }
    let report = TrainReport {
        version: REPORT_VERSION,
        triplets: triplets.len(),
        total_steps: total,
        epochs,
        model_fingerprint: model.fingerprint(),
    };
    Ok((model, report))
}

/// Look up triplet chunk ids in the store.
pub fn resolve_triplets(triplets: &[Triplet], chunks: &ChunkStore) -> Result<Vec<TextTriplet>> {
    triplets
        .iter()
        .map(|t| {
            let text = |id: &str| -> Result<String> {
                chunks
                    .get(id)
                    .map(|c| c.text.clone())
                    .ok_or_else(|| Error::InvalidArgument(format!("triplet references unknown chunk {id}")))
            };
            Ok(TextTriplet {
                anchor: text(&t.anchor_id)?,
                positive: text(&t.positive_id)?,
                negative: text(&t.negative_id)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::loss::{info_nce_loss, loss_and_gradients, TrainingBatch};
    use crate::encoder::ParamGroup;

    fn small() -> EncoderConfig {
        EncoderConfig {
            vocab_hash_dim: 97,
            embed_dim: 6,
            output_dim: 5,
            dropout_rate: 0.0,
        }
    }

    fn planted() -> Vec<TextTriplet> {
        let topic = |t: usize, i: usize| {
            (0..6)
                .map(|w| format!("t{t}w{}", (i * 3 + w) % 9))
                .collect::<Vec<_>>()
                .join(" ")
        };
        (0..24)
            .map(|i| {
                let t = i % 3;
                TextTriplet {
                    anchor: topic(t, i),
                    positive: topic(t, i + 1),
                    negative: topic((t + 1) % 3, i + 2),
                }
            })
            .collect()
    }

    #[test]
    fn finite_difference_gradients() {
        for trial in 0..6 {
            // odd trials leave an output column dead at initialization
            let cfg = EncoderConfig {
                embed_dim: if trial % 2 == 1 { 4 } else { 6 },
                ..small()
            };
            let model = EncoderModel::new(cfg, trial).unwrap();
            let trips = &planted()[..2];
            let batch = TrainingBatch::new(trips).unwrap();
            let (_, g) = loss_and_gradients(&model, &batch, None).unwrap();
            let h = 1e-5;
            let check = |group: ParamGroup, i: usize, analytic: f64| {
                let mut plus = model.clone();
                plus.param_mut(group)[i] += h;
                let mut minus = model.clone();
                minus.param_mut(group)[i] -= h;
                let num = (info_nce_loss(&plus, &batch, None).unwrap()
                    - info_nce_loss(&minus, &batch, None).unwrap())
                    / (2.0 * h);
                let denom = num.abs().max(analytic.abs()).max(1e-8);
                assert!((num - analytic).abs() / denom < 1e-4, "{group:?}[{i}]: {num} vs {analytic}");
            };
            for i in 0..g.projection.len() {
                check(ParamGroup::Projection, i, g.projection[i]);
            }
            for i in 0..g.bias.len() {
                check(ParamGroup::Bias, i, g.bias[i]);
            }
            for (&row, grad) in &g.rows {
                for (j, &a) in grad.iter().enumerate() {
                    check(ParamGroup::TokenTable, row * cfg.embed_dim + j, a);
                }
            }
        }
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let cfg = TrainConfig {
            learning_rate: 0.0,
            epochs: 2,
            batch_size: 4,
            ..Default::default()
        };
        let init = EncoderModel::new(small(), derive_seed(cfg.seed, "encoder")).unwrap();
        let (m, _) = train(&planted(), small(), &cfg).unwrap();
        assert_eq!(m, init);
    }

    #[test]
    fn same_seed_same_model() {
        let cfg = TrainConfig {
            learning_rate: 1e-2,
            epochs: 3,
            batch_size: 4,
            seed: 11,
            ..Default::default()
        };
        let enc = EncoderConfig {
            dropout_rate: 0.1,
            ..small()
        };
        let (a, ra) = train(&planted(), enc, &cfg).unwrap();
        let (b, rb) = train(&planted(), enc, &cfg).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_eq!(ra, rb);
    }

    #[test]
    fn loss_decreases_on_planted_data() {
        let cfg = TrainConfig {
            learning_rate: 5e-2,
            epochs: 30,
            batch_size: 4,
            ..Default::default()
        };
        let (_, r) = train(&planted(), small(), &cfg).unwrap();
        assert!(r.final_loss().unwrap() < r.first_loss().unwrap(), "{r:?}");
    }

    #[test]
    fn schedule_shape() {
        let cfg = TrainConfig {
            learning_rate: 1.0,
            warmup_fraction: 0.1,
            ..Default::default()
        };
        let lrs: Vec<f64> = (0..100).map(|s| learning_rate_at(&cfg, s, 100)).collect();
        assert!((lrs[0] - 0.1).abs() < 1e-12);
        assert!((lrs[9] - 1.0).abs() < 1e-12);
        assert!((lrs[10] - 1.0).abs() < 1e-12);
        assert!(lrs[10..].windows(2).all(|w| w[1] < w[0]));
        assert!(lrs[99] > 0.0);
    }

    #[test]
    fn bad_config_rejected() {
        let cfg = TrainConfig {
            batch_size: 0,
            ..Default::default()
        };
        assert!(train(&planted(), small(), &cfg).is_err());
        assert!(train(&[], small(), &TrainConfig::default()).is_err());
    }
}
