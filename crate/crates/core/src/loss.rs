//! Batch-hard triplet loss over a similarity matrix.

use candle_core::Tensor;

use crate::{Error, Result};

/// Square similarity matrix of a training batch with identity labels.
#[derive(Debug, Clone, Copy)]
pub struct LabeledSimilarityBatch<'a> {
    /// `[B, B]`, higher is more similar.
    pub scores: &'a Tensor,
    pub labels: &'a [usize],
    pub margin: f64,
}

/// Hardest positive / negative chosen for one anchor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HardestPair {
    pub positive: usize,
    pub negative: usize,
    /// `m − S[i, p] + S[i, n]` before clamping.
    pub slack: f64,
}

#[derive(Debug, Clone)]
pub struct TripletOutput {
    /// Scalar loss tensor, differentiable w.r.t. the scores.
    pub loss: Tensor,
    pub value: f64,
    pub anchors: Vec<HardestPair>,
    /// Anchors with a positive hinge term.
    pub active: usize,
}

impl TripletOutput {
    pub fn active_fraction(&self) -> f64 {
        self.active as f64 / self.anchors.len().max(1) as f64
    }
}

/// Hardest positive (lowest similarity) and hardest negative (highest
/// similarity) of every anchor; ties resolve to the lowest index.
pub fn hardest_pairs(scores: &[Vec<f64>], labels: &[usize], margin: f64) -> Result<Vec<HardestPair>> {
    let b = labels.len();
    if scores.len() != b || scores.iter().any(|r| r.len() != b) {
        return Err(Error::Shape(format!("scores must be {b}x{b} to match the labels")));
    }
    (0..b)
        .map(|i| {
            let mut pos: Option<usize> = None;
            let mut neg: Option<usize> = None;
            for j in 0..b {
                if j == i {
                    continue;
                }
                let s = scores[i][j];
                if labels[j] == labels[i] {
                    if pos.is_none_or(|p| s < scores[i][p]) {
                        pos = Some(j);
                    }
                } else if neg.is_none_or(|n| s > scores[i][n]) {
                    neg = Some(j);
                }
            }
            match (pos, neg) {
                (Some(p), Some(n)) => Ok(HardestPair {
                    positive: p,
                    negative: n,
                    slack: margin - scores[i][p] + scores[i][n],
                }),
                (None, _) => Err(Error::Sampler(format!("anchor {i} has no positive"))),
                (_, None) => Err(Error::Sampler(format!("anchor {i} has no negative"))),
            }
        })
        .collect()
}

/// `Σ_i [m − min_p S[i, p] + max_n S[i, n]]₊`, self-pairs excluded.
pub fn batch_hard_triplet(batch: &LabeledSimilarityBatch<'_>) -> Result<TripletOutput> {
    if batch.margin <= 0.0 {
        return Err(Error::Config(format!("margin must be positive, got {}", batch.margin)));
    }
    let (rows, cols) = batch.scores.dims2()?;
    if rows != cols || rows != batch.labels.len() {
        return Err(Error::Shape(format!(
            "scores are {rows}x{cols} but {} labels were given",
            batch.labels.len()
        )));
    }
    let values = batch
        .scores
        .to_dtype(candle_core::DType::F64)?
        .to_vec2::<f64>()?;
    let anchors = hardest_pairs(&values, batch.labels, batch.margin)?;
    let b = rows;
    let mut pos_mask = vec![0f64; b * b];
    let mut neg_mask = vec![0f64; b * b];
    for (i, a) in anchors.iter().enumerate() {
        pos_mask[i * b + a.positive] = 1.0;
        neg_mask[i * b + a.negative] = 1.0;
    }
    let dev = batch.scores.device();
    let dt = batch.scores.dtype();
    let pos_mask = Tensor::from_vec(pos_mask, (b, b), dev)?.to_dtype(dt)?;
    let neg_mask = Tensor::from_vec(neg_mask, (b, b), dev)?.to_dtype(dt)?;
    let s_pos = batch.scores.mul(&pos_mask)?.sum(1)?;
    let s_neg = batch.scores.mul(&neg_mask)?.sum(1)?;
    let terms = s_neg.sub(&s_pos)?.affine(1.0, batch.margin)?.relu()?;
    let loss = terms.sum_all()?;
    let value = anchors.iter().map(|a| a.slack.max(0.0)).sum();
    let active = anchors.iter().filter(|a| a.slack > 0.0).count();
    Ok(TripletOutput {
        loss,
        value,
        anchors,
        active,
    })
}
