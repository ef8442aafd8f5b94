//! Query-adaptive local matching.
//!
//! Every spatial location of a query map becomes a unit-norm 1×1 kernel that
//! is correlated with the gallery map; global max pooling keeps the best
//! local correspondence for every location. Response vectors of several
//! stages are concatenated (multi-scale) and, for the domain-specific stream,
//! mixed over the K domain experts with a learned attention block.

use std::path::Path;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::FeatureMapSet;
use crate::nn::{param, softmax_last, BnMode, Grad, Linear};
use crate::norm::bottleneck_width;
use crate::state::{push_buffer, push_param, NamedTensor, StateDict};
use crate::{Error, Result};

const NORM_EPS: f64 = 1e-12;

/// Cap on the number of similarity entries materialized per chunk.
const MAX_CHUNK_ELEMS: usize = 1 << 23;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Best responses of query locations followed by those of gallery
    /// locations.
    Bidirectional,
    /// Query-side best responses only.
    Query,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchConfig {
    /// 0-based stage indices used as matching scales.
    pub scales: Vec<usize>,
    pub direction: Direction,
    /// One head per scale (scores summed) instead of one head over the
    /// concatenated responses.
    pub per_scale_heads: bool,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            scales: vec![0, 1],
            direction: Direction::Bidirectional,
            per_scale_heads: false,
        }
    }
}

impl MatchConfig {
    /// Response length of every configured scale for maps of the given sizes.
    pub fn response_dims(&self, stage_sizes: &[(usize, usize)]) -> Result<Vec<usize>> {
        if self.scales.is_empty() {
            return Err(Error::Config("at least one matching scale is required".into()));
        }
        self.scales
            .iter()
            .map(|&s| {
                let (h, w) = *stage_sizes.get(s).ok_or_else(|| {
                    Error::StageMismatch(format!(
                        "scale {s} requested but the backbone has {} stages",
                        stage_sizes.len()
                    ))
                })?;
                Ok(match self.direction {
                    Direction::Bidirectional => 2 * h * w,
                    Direction::Query => h * w,
                })
            })
            .collect()
    }
}

/// `[N, C, H, W]` → `[N, H·W, C]` with every location L2-normalized.
pub fn location_features(map: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = map.dims4()?;
    let flat = map.reshape((n, c, h * w))?.transpose(1, 2)?.contiguous()?;
    let norm = flat.sqr()?.sum_keepdim(2)?.affine(1.0, NORM_EPS)?.sqrt()?;
    Ok(flat.broadcast_div(&norm)?)
}

/// Local patches of one query map organized as unit-norm correlation kernels.
#[derive(Debug, Clone)]
pub struct MatchKernelSet {
    kernels: Tensor,
    size: (usize, usize),
}

impl MatchKernelSet {
    /// Kernels from a `[C, H, W]` map, one per location in row-major order.
    pub fn from_map(query: &Tensor) -> Result<Self> {
        let (c, h, w) = query.dims3()?;
        let kernels = location_features(&query.unsqueeze(0)?)?.reshape((h * w, c))?;
        Ok(Self {
            kernels,
            size: (h, w),
        })
    }

    /// `[H·W, C]`, unit rows.
    pub fn kernels(&self) -> &Tensor {
        &self.kernels
    }

    pub fn len(&self) -> usize {
        self.size.0 * self.size.1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn source_size(&self) -> (usize, usize) {
        self.size
    }

    /// Local similarity maps `[H·W, Hg·Wg]`, computed by convolving the
    /// (normalized) gallery map with the kernels.
    pub fn correlate(&self, gallery: &Tensor) -> Result<Tensor> {
        let (c, hg, wg) = gallery.dims3()?;
        let (l, kc) = self.kernels.dims2()?;
        if c != kc {
            return Err(Error::ChannelMismatch { expected: kc, got: c });
        }
        let g = location_features(&gallery.unsqueeze(0)?)?
            .transpose(1, 2)?
            .reshape((1, c, hg, wg))?;
        let weight = self.kernels.reshape((l, c, 1, 1))?;
        Ok(g.conv2d(&weight, 0, 1, 1, 1)?.reshape((l, hg * wg))?)
    }

    pub fn respond(&self, gallery: &Tensor, direction: Direction) -> Result<ResponseVector> {
        let sim = self.correlate(gallery)?;
        let q_side = sim.max(1)?;
        let values = match direction {
            Direction::Query => q_side,
            Direction::Bidirectional => Tensor::cat(&[q_side, sim.max(0)?], 0)?,
        };
        Ok(ResponseVector { values, scale: 0 })
    }
}

/// Best-correspondence responses for one image pair at one scale.
#[derive(Debug, Clone)]
pub struct ResponseVector {
    /// `[Hq·Wq]` query-side entries, then `[Hg·Wg]` gallery-side entries when
    /// matching in both directions.
    pub values: Tensor,
    pub scale: usize,
}

impl ResponseVector {
    pub fn to_vec(&self) -> Result<Vec<f64>> {
        crate::nn::to_f64_vec(&self.values)
    }
}

/// Responses of one `[C, Hq, Wq]` query map against one `[C, Hg, Wg]` gallery
/// map.
pub fn qaconv_response(
    query_map: &Tensor,
    gallery_map: &Tensor,
    direction: Direction,
) -> Result<ResponseVector> {
    MatchKernelSet::from_map(query_map)?.respond(gallery_map, direction)
}

/// Responses of every (query, gallery) pair at one scale: `[N, M, D]`.
pub fn pairwise_responses(query: &Tensor, gallery: &Tensor, direction: Direction) -> Result<Tensor> {
    let (n, c, hq, wq) = query.dims4()?;
    let (m, cg, hg, wg) = gallery.dims4()?;
    if c != cg {
        return Err(Error::ChannelMismatch { expected: c, got: cg });
    }
    let (lq, lg) = (hq * wq, hg * wg);
    let q = location_features(query)?;
    let g = location_features(gallery)?.reshape((m * lg, c))?.t()?.contiguous()?;
    let chunk = (MAX_CHUNK_ELEMS / (lq * m * lg).max(1)).clamp(1, n);
    let mut parts = Vec::new();
    let mut start = 0;
    while start < n {
        let len = chunk.min(n - start);
        let qc = q.narrow(0, start, len)?.reshape((len * lq, c))?;
        let sim = qc.matmul(&g)?.reshape((len, lq, m, lg))?;
        let q_side = sim.max(3)?.transpose(1, 2)?;
        let part = match direction {
            Direction::Query => q_side.contiguous()?,
            Direction::Bidirectional => Tensor::cat(&[q_side, sim.max(1)?], 2)?,
        };
        parts.push(part);
        start += len;
    }
    Ok(Tensor::cat(&parts, 0)?)
}

fn check_sets(query: &FeatureMapSet, gallery: &FeatureMapSet, cfg: &MatchConfig) -> Result<()> {
    if query.num_stages() != gallery.num_stages() {
        return Err(Error::StageMismatch(format!(
            "query has {} stages, gallery {}",
            query.num_stages(),
            gallery.num_stages()
        )));
    }
    if let Some(&s) = cfg.scales.iter().find(|&&s| s >= query.num_stages()) {
        return Err(Error::StageMismatch(format!(
            "scale {s} requested but feature sets have {} stages",
            query.num_stages()
        )));
    }
    Ok(())
}

/// Concatenated responses over configured scales: `[N, M, Σ D_s]`.
pub fn multiscale_responses(
    query: &FeatureMapSet,
    gallery: &FeatureMapSet,
    cfg: &MatchConfig,
) -> Result<Tensor> {
    check_sets(query, gallery, cfg)?;
    let parts = cfg
        .scales
        .iter()
        .map(|&s| pairwise_responses(&query.maps[s], &gallery.maps[s], cfg.direction))
        .collect::<Result<Vec<_>>>()?;
    if parts.len() == 1 {
        return Ok(parts.into_iter().next().unwrap());
    }
    Ok(Tensor::cat(&parts, 2)?)
}

/// Batch norm with a single channel spanning every element of its input.
#[derive(Debug)]
pub struct ScalarBn {
    pub gamma: Var,
    pub beta: Var,
    running_mean: Var,
    running_var: Var,
    momentum: f64,
    eps: f64,
}

impl ScalarBn {
    pub fn new(dtype: DType, device: &Device) -> Result<Self> {
        Ok(Self {
            gamma: Var::ones(1, dtype, device)?,
            beta: Var::zeros(1, dtype, device)?,
            running_mean: Var::zeros(1, dtype, device)?,
            running_var: Var::ones(1, dtype, device)?,
            momentum: crate::norm::DEFAULT_MOMENTUM,
            eps: crate::norm::DEFAULT_EPS,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: BnMode, grad: Grad) -> Result<Tensor> {
        let gamma = param(&self.gamma, grad);
        let beta = param(&self.beta, grad);
        let (mean, var) = match mode {
            BnMode::Eval => (
                self.running_mean.as_tensor().detach(),
                self.running_var.as_tensor().detach(),
            ),
            BnMode::Train => {
                let mean = x.mean_all()?.reshape(1)?;
                let var = x.broadcast_sub(&mean)?.sqr()?.mean_all()?.reshape(1)?;
                let n = x.elem_count() as f64;
                let unbiased = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
                let m = self.momentum;
                let rm = &self.running_mean;
                let rv = &self.running_var;
                rm.set(&(rm.as_tensor().affine(1.0 - m, 0.0)? + mean.detach().affine(m, 0.0)?)?)?;
                rv.set(&(rv.as_tensor().affine(1.0 - m, 0.0)? + var.detach().affine(m * unbiased, 0.0)?)?)?;
                (mean, var)
            }
        };
        let scale = gamma.broadcast_div(&var.affine(1.0, self.eps)?.sqrt()?)?;
        Ok(x.broadcast_sub(&mean)?.broadcast_mul(&scale)?.broadcast_add(&beta)?)
    }

    fn collect(&self, prefix: &str, out: &mut Vec<NamedTensor>) {
        push_param(out, format!("{prefix}.gamma"), &self.gamma);
        push_param(out, format!("{prefix}.beta"), &self.beta);
        push_buffer(out, format!("{prefix}.running_mean"), &self.running_mean);
        push_buffer(out, format!("{prefix}.running_var"), &self.running_var);
    }
}

/// Normalization → linear → normalization reduction of a response vector to
/// a scalar score.
#[derive(Debug)]
pub struct HeadBlock {
    pub pre: ScalarBn,
    pub fc: Linear,
    pub post: ScalarBn,
}

#[derive(Debug)]
pub struct SimilarityHead {
    blocks: Vec<HeadBlock>,
    widths: Vec<usize>,
}

impl SimilarityHead {
    /// `scale_dims` are the per-scale response lengths; with `per_scale` each
    /// scale gets its own block and the block scores are summed. The linear
    /// layers start as plain averages of the responses.
    pub fn new(scale_dims: &[usize], per_scale: bool, dtype: DType, device: &Device) -> Result<Self> {
        let widths = if per_scale {
            scale_dims.to_vec()
        } else {
            vec![scale_dims.iter().sum()]
        };
        let blocks = widths
            .iter()
            .map(|&w| {
                Ok(HeadBlock {
                    pre: ScalarBn::new(dtype, device)?,
                    fc: Linear::averaging(w, 1, dtype, device)?,
                    post: ScalarBn::new(dtype, device)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { blocks, widths })
    }

    pub fn input_dim(&self) -> usize {
        self.widths.iter().sum()
    }

    pub fn blocks(&self) -> &[HeadBlock] {
        &self.blocks
    }

    /// `[N, M, D]` responses → `[N, M]` scores.
    pub fn forward(&self, responses: &Tensor, mode: BnMode, grad: Grad) -> Result<Tensor> {
        let (n, m, d) = responses.dims3()?;
        if d != self.input_dim() {
            return Err(Error::Shape(format!(
                "head expects responses of length {}, got {d}",
                self.input_dim()
            )));
        }
        let mut total: Option<Tensor> = None;
        let mut offset = 0;
        for (block, &w) in self.blocks.iter().zip(&self.widths) {
            let seg = if self.blocks.len() == 1 {
                responses.clone()
            } else {
                responses.narrow(2, offset, w)?
            };
            offset += w;
            let x = block.pre.forward(&seg, mode, grad)?.reshape((n * m, w))?;
            let s = block.fc.forward(&x, grad)?;
            let s = block.post.forward(&s, mode, grad)?.reshape((n, m))?;
            total = Some(match total {
                None => s,
                Some(t) => (t + s)?,
            });
        }
        Ok(total.expect("head has at least one block"))
    }
}

impl StateDict for SimilarityHead {
    fn collect_state(&self, prefix: &str, out: &mut Vec<NamedTensor>) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.pre.collect(&format!("{prefix}.block{i}.pre"), out);
            push_param(out, format!("{prefix}.block{i}.fc.weight"), &b.fc.weight);
            push_param(out, format!("{prefix}.block{i}.fc.bias"), &b.fc.bias);
            b.post.collect(&format!("{prefix}.block{i}.post"), out);
        }
    }
}

/// FC → ReLU → FC → softmax over the concatenated per-domain responses of a
/// pair, giving one K-simplex per pair.
#[derive(Debug)]
pub struct DomainAttention {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl DomainAttention {
    pub fn new<R: Rng + ?Sized>(
        domains: usize,
        response_dim: usize,
        reduction: usize,
        rng: &mut R,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        let input = domains * response_dim;
        let hidden = bottleneck_width(input, reduction);
        Ok(Self {
            fc1: Linear::new(input, hidden, rng, dtype, device)?,
            fc2: Linear::new(hidden, domains, rng, dtype, device)?,
        })
    }

    pub fn domains(&self) -> usize {
        self.fc2.out_dim()
    }

    /// `K × [N, M, D]` → `[N, M, K]`.
    pub fn weights(&self, responses: &[Tensor], grad: Grad) -> Result<Tensor> {
        if responses.len() != self.domains() {
            return Err(Error::Shape(format!(
                "attention expects {} domains, got {}",
                self.domains(),
                responses.len()
            )));
        }
        let (n, m, _) = responses[0].dims3()?;
        let cat = Tensor::cat(responses, 2)?;
        let width = cat.dim(2)?;
        if width != self.fc1.in_dim() {
            return Err(Error::Shape(format!(
                "attention expects {} concatenated responses, got {width}",
                self.fc1.in_dim()
            )));
        }
        let x = cat.reshape((n * m, width))?;
        let h = self.fc1.forward(&x, grad)?.relu()?;
        Ok(softmax_last(&self.fc2.forward(&h, grad)?)?.reshape((n, m, self.domains()))?)
    }
}

impl StateDict for DomainAttention {
    fn collect_state(&self, prefix: &str, out: &mut Vec<NamedTensor>) {
        push_param(out, format!("{prefix}.fc1.weight"), &self.fc1.weight);
        push_param(out, format!("{prefix}.fc1.bias"), &self.fc1.bias);
        push_param(out, format!("{prefix}.fc2.weight"), &self.fc2.weight);
        push_param(out, format!("{prefix}.fc2.bias"), &self.fc2.bias);
    }
}

/// How the domain-specific stream combines its K experts for unlabeled
/// images.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mixing {
    /// Learned per-pair attention over expert responses.
    Attention,
    /// Arithmetic mean of the expert responses.
    Average,
    /// Sum of the expert heads' scores.
    Voting,
}

/// Expert weights used by [`msda_qaconv_scores`].
#[derive(Debug, Clone, Copy)]
pub enum MixWeights<'a> {
    Learned(&'a DomainAttention),
    Uniform,
}

/// `Σ_k α[.., k] r_k` for `K × [N, M, D]` responses and `[N, M, K]` weights.
pub fn mix_responses(responses: &[Tensor], alpha: &Tensor) -> Result<Tensor> {
    let mut acc: Option<Tensor> = None;
    for (k, r) in responses.iter().enumerate() {
        let term = r.broadcast_mul(&alpha.narrow(D::Minus1, k, 1)?)?;
        acc = Some(match acc {
            None => term,
            Some(a) => (a + term)?,
        });
    }
    acc.ok_or_else(|| Error::Shape("no expert responses to mix".into()))
}

/// Multi-scale matching scores `[N, M]` for two feature sets of one stream.
pub fn ms_qaconv_scores(
    query: &FeatureMapSet,
    gallery: &FeatureMapSet,
    head: &SimilarityHead,
    cfg: &MatchConfig,
    mode: BnMode,
    grad: Grad,
) -> Result<Tensor> {
    head.forward(&multiscale_responses(query, gallery, cfg)?, mode, grad)
}

/// Domain-adaptive multi-scale matching over K experts' feature sets.
pub fn msda_qaconv_scores(
    query_sets: &[FeatureMapSet],
    gallery_sets: &[FeatureMapSet],
    weights: MixWeights<'_>,
    head: &SimilarityHead,
    cfg: &MatchConfig,
    mode: BnMode,
    grad: Grad,
) -> Result<Tensor> {
    let k = query_sets.len();
    if k == 0 || gallery_sets.len() != k {
        return Err(Error::Shape(format!(
            "expected matching non-empty expert lists, got {k} query and {} gallery sets",
            gallery_sets.len()
        )));
    }
    if let MixWeights::Learned(att) = weights {
        if att.domains() != k {
            return Err(Error::Shape(format!(
                "attention covers {} domains but {k} experts were given",
                att.domains()
            )));
        }
    }
    let responses = query_sets
        .iter()
        .zip(gallery_sets)
        .map(|(q, g)| multiscale_responses(q, g, cfg))
        .collect::<Result<Vec<_>>>()?;
    let mixed = match weights {
        MixWeights::Learned(att) => mix_responses(&responses, &att.weights(&responses, grad)?)?,
        MixWeights::Uniform => {
            let (n, m, _) = responses[0].dims3()?;
            let dt = responses[0].dtype();
            let alpha = Tensor::full(1.0 / k as f64, (n, m, k), responses[0].device())?.to_dtype(dt)?;
            mix_responses(&responses, &alpha)?
        }
    };
    head.forward(&mixed, mode, grad)
}

/// Sum of per-expert multi-scale scores.
pub fn voting_scores(
    query_sets: &[FeatureMapSet],
    gallery_sets: &[FeatureMapSet],
    head: &SimilarityHead,
    cfg: &MatchConfig,
    mode: BnMode,
    grad: Grad,
) -> Result<Tensor> {
    if query_sets.is_empty() || query_sets.len() != gallery_sets.len() {
        return Err(Error::Shape("expert lists must be non-empty and of equal length".into()));
    }
    let mut acc: Option<Tensor> = None;
    for (q, g) in query_sets.iter().zip(gallery_sets) {
        let s = ms_qaconv_scores(q, g, head, cfg, mode, grad)?;
        acc = Some(match acc {
            None => s,
            Some(a) => (a + s)?,
        });
    }
    Ok(acc.unwrap())
}

/// For every query location, the row-major index of its best-matching
/// gallery location.
pub fn correspondence(query_map: &Tensor, gallery_map: &Tensor) -> Result<Vec<u32>> {
    let sim = MatchKernelSet::from_map(query_map)?.correlate(gallery_map)?;
    Ok(sim.argmax(1)?.to_vec1::<u32>()?)
}

/// Writes `[pairs, Hq·Wq]` correspondence indices as an `.npy` array.
pub fn write_correspondences(path: &Path, rows: &[Vec<u32>]) -> Result<()> {
    let width = rows.first().map(|r| r.len()).unwrap_or(0);
    if rows.iter().any(|r| r.len() != width) {
        return Err(Error::Shape("correspondence rows differ in length".into()));
    }
    let flat: Vec<i64> = rows.iter().flatten().map(|&v| v as i64).collect();
    let t = Tensor::from_vec(flat, (rows.len(), width), &Device::Cpu)?;
    t.write_npy(path)?;
    Ok(())
}

/// Dense row-major score matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreMatrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl ScoreMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values cannot form a {rows}x{cols} matrix",
                values.len()
            )));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (rows, cols) = t.dims2()?;
        Self::new(rows, cols, crate::nn::to_f64_vec(t)?)
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }
}

/// Pairwise scores with the labels of both sides attached.
#[derive(Debug, Clone)]
pub struct SimilarityMatrix {
    pub scores: ScoreMatrix,
    pub query_labels: Vec<crate::data::ImageLabel>,
    pub gallery_labels: Vec<crate::data::ImageLabel>,
}
