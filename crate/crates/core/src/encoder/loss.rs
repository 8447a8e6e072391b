//! Inner-product similarity and InfoNCE with one positive, one hard negative
//! and the 2K−2 positives/negatives of the other anchors in the batch:
//!
//! ℓ_i = −log( e^{f(i,i⁺)} / (e^{f(i,i⁺)} + Σ_{j≠i} (e^{f(i,j⁺)} + e^{f(i,j⁻)}) + e^{f(i,i⁻)}) )
//!
//! No temperature; similarities are used raw.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{EncoderModel, Forward};
use crate::error::{Error, Result};

pub fn similarity(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            left: x.len(),
            right: y.len(),
        });
    }
    Ok(dot(x, y))
}

/// Four-lane dot product; the fixed lane split keeps results reproducible
/// while letting the loop vectorize.
pub(crate) fn dot(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len().min(y.len());
    let (x, y) = (&x[..n], &y[..n]);
    let mut acc = [0.0; 4];
    let mut xc = x.chunks_exact(4);
    let mut yc = y.chunks_exact(4);
    for (a, b) in xc.by_ref().zip(yc.by_ref()) {
        for l in 0..4 {
            acc[l] += a[l] * b[l];
        }
    }
    let tail: f64 = xc.remainder().iter().zip(yc.remainder()).map(|(a, b)| a * b).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `y += a·x`
pub(crate) fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Mean over rows of `lse(row) − row[positive[i]]`.
pub fn info_nce_from_logits(logits: &[Vec<f64>], positive: &[usize]) -> f64 {
    let total: f64 = logits
        .iter()
        .zip(positive)
        .map(|(row, &p)| log_sum_exp(row) - row[p])
        .sum();
    total / logits.len() as f64
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextTriplet {
    pub anchor: String,
    pub positive: String,
    pub negative: String,
}

#[derive(Debug, Clone, Copy)]
pub struct TrainingBatch<'a> {
    triplets: &'a [TextTriplet],
}

impl<'a> TrainingBatch<'a> {
    pub fn new(triplets: &'a [TextTriplet]) -> Result<Self> {
        if triplets.is_empty() {
            return Err(Error::InvalidArgument("a batch needs at least one triplet".into()));
        }
        Ok(TrainingBatch { triplets })
    }

    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }

    pub fn triplets(&self) -> &'a [TextTriplet] {
        self.triplets
    }
}

/// Loss and its gradient with respect to every embedding in the batch.
#[derive(Debug, Clone, PartialEq)]
pub struct InfoNceGrad {
    pub loss: f64,
    pub d_anchor: Vec<Vec<f64>>,
    pub d_positive: Vec<Vec<f64>>,
    pub d_negative: Vec<Vec<f64>>,
}

fn check_shapes(a: &[Vec<f64>], p: &[Vec<f64>], n: &[Vec<f64>]) -> Result<usize> {
    if a.is_empty() || a.len() != p.len() || a.len() != n.len() {
        return Err(Error::InvalidArgument(format!(
            "batch shape mismatch: {} anchors, {} positives, {} negatives",
            a.len(),
            p.len(),
            n.len()
        )));
    }
    let d = a[0].len();
    for v in a.iter().chain(p).chain(n) {
        if v.len() != d {
            return Err(Error::DimensionMismatch { left: d, right: v.len() });
        }
    }
    Ok(d)
}

/// InfoNCE over embeddings. Candidate order per anchor row is
/// `[p_0, n_0, p_1, n_1, …]`, so anchor i's positive sits at index 2i.
pub fn info_nce_with_grad(
    anchors: &[Vec<f64>],
    positives: &[Vec<f64>],
    negatives: &[Vec<f64>],
) -> Result<InfoNceGrad> {
    let d = check_shapes(anchors, positives, negatives)?;
    let k = anchors.len();
    let cands: Vec<&Vec<f64>> = positives.iter().zip(negatives).flat_map(|(p, n)| [p, n]).collect();
    let mut d_anchor = vec![vec![0.0; d]; k];
    let mut d_cand = vec![vec![0.0; d]; 2 * k];
    let mut loss = 0.0;
    let scale = 1.0 / k as f64;
    for i in 0..k {
        let row: Vec<f64> = cands.iter().map(|c| dot(&anchors[i], c)).collect();
        let lse = log_sum_exp(&row);
        loss += lse - row[2 * i];
        for (c, &s) in row.iter().enumerate() {
            let mut g = (s - lse).exp();
            if c == 2 * i {
                g -= 1.0;
            }
            g *= scale;
            if g == 0.0 {
                continue;
            }
            axpy(&mut d_anchor[i], g, cands[c]);
            axpy(&mut d_cand[c], g, &anchors[i]);
        }
    }
    let mut d_positive = Vec::with_capacity(k);
    let mut d_negative = Vec::with_capacity(k);
    for (j, g) in d_cand.into_iter().enumerate() {
        if j % 2 == 0 {
            d_positive.push(g);
        } else {
            d_negative.push(g);
        }
    }
    Ok(InfoNceGrad {
        loss: loss * scale,
        d_anchor,
        d_positive,
        d_negative,
    })
}

pub fn info_nce(anchors: &[Vec<f64>], positives: &[Vec<f64>], negatives: &[Vec<f64>]) -> Result<f64> {
    Ok(info_nce_with_grad(anchors, positives, negatives)?.loss)
}

/// Parameter gradients; token rows are sparse.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub rows: BTreeMap<usize, Vec<f64>>,
    pub projection: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Reusable gradient accumulator with a dense token-row buffer and a list of
/// the rows touched since the last `clear`.
pub(crate) struct GradBuffer {
    embed_dim: usize,
    rows: Vec<f64>,
    seen: Vec<bool>,
    pub touched: Vec<usize>,
    pub projection: Vec<f64>,
    pub bias: Vec<f64>,
}

impl GradBuffer {
    pub fn new(model: &EncoderModel) -> Self {
        GradBuffer {
            embed_dim: model.cfg.embed_dim,
            rows: vec![0.0; model.token_table.len()],
            seen: vec![false; model.cfg.vocab_hash_dim],
            touched: Vec::new(),
            projection: vec![0.0; model.projection.len()],
            bias: vec![0.0; model.bias.len()],
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.rows[r * self.embed_dim..(r + 1) * self.embed_dim]
    }

    fn row_mut(&mut self, r: usize) -> &mut [f64] {
        if !self.seen[r] {
            self.seen[r] = true;
            self.touched.push(r);
        }
        &mut self.rows[r * self.embed_dim..(r + 1) * self.embed_dim]
    }

    pub fn clear(&mut self) {
        for &r in &self.touched {
            self.seen[r] = false;
            self.rows[r * self.embed_dim..(r + 1) * self.embed_dim].fill(0.0);
        }
        self.touched.clear();
        self.projection.fill(0.0);
        self.bias.fill(0.0);
    }

    fn into_gradients(self) -> Gradients {
        let rows = self.touched.iter().map(|&r| (r, self.row(r).to_vec())).collect();
        Gradients {
            rows,
            projection: self.projection,
            bias: self.bias,
        }
    }
}

impl EncoderModel {
    fn backprop(&self, bag: &[(usize, u32)], fwd: &Forward, grad_out: &[f64], g: &mut GradBuffer) {
        let e = self.cfg.embed_dim;
        let d = self.cfg.output_dim;
        for (b, go) in g.bias.iter_mut().zip(grad_out) {
            *b += go;
        }
        let live = grad_out.len();
        let mut d_hidden = vec![0.0; e];
        for (i, (dh, &h)) in d_hidden.iter_mut().zip(&fwd.hidden).enumerate() {
            if h != 0.0 {
                axpy(&mut g.projection[i * d..i * d + live], h, grad_out);
            }
            *dh = dot(&self.projection[i * d..i * d + live], grad_out);
        }
        if let Some(mask) = &fwd.mask {
            d_hidden.iter_mut().zip(mask).for_each(|(x, m)| *x *= m);
        }
        let inv = 1.0 / fwd.n_tokens as f64;
        for &(bucket, count) in bag {
            axpy(g.row_mut(bucket), f64::from(count) * inv, &d_hidden);
        }
    }
}

/// Bags of one triplet: anchor, positive, negative.
pub(crate) type TripletBags<'a> = [&'a [(usize, u32)]; 3];

/// Batch loss; gradients are added into `g`. Dropout draws follow the order
/// anchor, positive, negative for each triplet.
pub(crate) fn accumulate_batch(
    model: &EncoderModel,
    batch: &[TripletBags<'_>],
    mut dropout: Option<&mut ChaCha8Rng>,
    g: &mut GradBuffer,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("a batch needs at least one triplet".into()));
    }
    let live = model.live_outputs();
    let mut fwd: [Vec<Forward>; 3] = Default::default();
    for bags in batch {
        for (f, bag) in fwd.iter_mut().zip(bags) {
            f.push(model.forward_bag(bag, dropout.as_deref_mut(), live)?);
        }
    }
    let outs = |f: &[Forward]| f.iter().map(|x| x.output.clone()).collect::<Vec<_>>();
    let res = info_nce_with_grad(&outs(&fwd[0]), &outs(&fwd[1]), &outs(&fwd[2]))?;
    let grads = [&res.d_anchor, &res.d_positive, &res.d_negative];
    for (i, bags) in batch.iter().enumerate() {
        for r in 0..3 {
            model.backprop(bags[r], &fwd[r][i], &grads[r][i], g);
        }
    }
    Ok(res.loss)
}

pub fn loss_and_gradients(
    model: &EncoderModel,
    batch: &TrainingBatch<'_>,
    dropout: Option<&mut ChaCha8Rng>,
) -> Result<(f64, Gradients)> {
    let bags: Vec<[_; 3]> = batch
        .triplets()
        .iter()
        .map(|t| [model.bag(&t.anchor), model.bag(&t.positive), model.bag(&t.negative)])
        .collect();
    let refs: Vec<TripletBags<'_>> = bags.iter().map(|[a, p, n]| [&a[..], &p[..], &n[..]]).collect();
    let mut g = GradBuffer::new(model);
    let loss = accumulate_batch(model, &refs, dropout, &mut g)?;
    Ok((loss, g.into_gradients()))
}

/// Batch InfoNCE loss. In train mode, dropout is drawn from `rng`.
pub fn info_nce_loss(model: &EncoderModel, batch: &TrainingBatch<'_>, rng: Option<&mut ChaCha8Rng>) -> Result<f64> {
    Ok(loss_and_gradients(model, batch, rng)?.0)
}
