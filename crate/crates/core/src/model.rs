//! The two-stream model: shared backbone, domain-specific matching (per-expert
//! head plus domain-adaptive head) and domain-invariant matching.

use candle_core::{DType, Device, Tensor};
use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, FeatureMapSet, ForwardOptions};
use crate::data::{images_to_tensor, ImageLabel, PixelNorm};
use crate::matching::{
    ms_qaconv_scores, msda_qaconv_scores, voting_scores, DomainAttention, MatchConfig, Mixing,
    MixWeights, ScoreMatrix, SimilarityHead, SimilarityMatrix,
};
use crate::nn::{BnMode, Grad};
use crate::state::{NamedTensor, StateDict};
use crate::{Error, Result};

const FEATURE_CHUNK: usize = 64;
const QUERY_CHUNK: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub matching: MatchConfig,
    pub mixing: Mixing,
}

/// Learnable parameter groups; every tensor of the model belongs to exactly
/// one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ParamGroup {
    BackboneConv,
    Dsbn(usize),
    DsHead,
    Msda,
    InvariantNorm,
    DiHead,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stream {
    Ds,
    Di,
}

/// Precomputed features of a set of images for one stream.
#[derive(Debug, Clone)]
pub enum StreamFeatures {
    /// One feature set per domain expert.
    Ds(Vec<FeatureMapSet>),
    Di(FeatureMapSet),
}

impl StreamFeatures {
    pub fn len(&self) -> usize {
        match self {
            StreamFeatures::Ds(sets) => sets.first().map_or(0, |s| s.batch_size()),
            StreamFeatures::Di(set) => set.batch_size(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn narrow(&self, start: usize, len: usize) -> Result<Self> {
        Ok(match self {
            StreamFeatures::Ds(sets) => StreamFeatures::Ds(
                sets.iter().map(|s| s.narrow(start, len)).collect::<Result<_>>()?,
            ),
            StreamFeatures::Di(set) => StreamFeatures::Di(set.narrow(start, len)?),
        })
    }
}

#[derive(Debug)]
pub struct TalModel {
    config: ModelConfig,
    pub backbone: Backbone,
    /// Multi-scale head of the domain-specific stream, trained on
    /// domain-labeled batches.
    pub ds_head: SimilarityHead,
    pub attention: DomainAttention,
    /// Head of the domain-adaptive matching over all experts.
    pub msda_head: SimilarityHead,
    pub di_head: SimilarityHead,
    dtype: DType,
    device: Device,
}

impl TalModel {
    pub fn new(config: &ModelConfig, domains: usize, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = Backbone::new(&config.backbone, domains, &mut rng, dtype, device)?;
        let dims = config.matching.response_dims(&config.backbone.stage_sizes())?;
        let per_scale = config.matching.per_scale_heads;
        let ds_head = SimilarityHead::new(&dims, per_scale, dtype, device)?;
        let attention = DomainAttention::new(
            domains,
            dims.iter().sum(),
            config.backbone.reduction,
            &mut rng,
            dtype,
            device,
        )?;
        let msda_head = SimilarityHead::new(&dims, per_scale, dtype, device)?;
        let di_head = SimilarityHead::new(&dims, per_scale, dtype, device)?;
        Ok(Self {
            config: config.clone(),
            backbone,
            ds_head,
            attention,
            msda_head,
            di_head,
            dtype,
            device: device.clone(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn domains(&self) -> usize {
        self.backbone.domains()
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn groups(&self) -> Vec<ParamGroup> {
        let mut g = vec![ParamGroup::BackboneConv];
        g.extend((0..self.domains()).map(ParamGroup::Dsbn));
        g.extend([
            ParamGroup::DsHead,
            ParamGroup::Msda,
            ParamGroup::InvariantNorm,
            ParamGroup::DiHead,
        ]);
        g
    }

    pub fn group_state(&self, group: ParamGroup) -> Vec<NamedTensor> {
        let mut out = Vec::new();
        match group {
            ParamGroup::BackboneConv => self.backbone.collect_conv_state("backbone", &mut out),
            ParamGroup::Dsbn(i) => self.backbone.collect_dsbn_state("backbone", i, &mut out),
            ParamGroup::DsHead => self.ds_head.collect_state("ds_head", &mut out),
            ParamGroup::Msda => {
                self.attention.collect_state("msda.attention", &mut out);
                self.msda_head.collect_state("msda.head", &mut out);
            }
            ParamGroup::InvariantNorm => self.backbone.collect_invariant_state("backbone", &mut out),
            ParamGroup::DiHead => self.di_head.collect_state("di_head", &mut out),
        }
        out
    }

    /// Normalized model input for a list of images.
    pub fn input(&self, images: &[&RgbImage], norm: &PixelNorm) -> Result<Tensor> {
        images_to_tensor(images, norm, self.dtype, &self.device)
    }

    /// Eval-mode, detached features of `images` for one stream.
    pub fn features(&self, images: &Tensor, stream: Stream) -> Result<StreamFeatures> {
        let opts = ForwardOptions::EVAL;
        Ok(match stream {
            Stream::Ds => StreamFeatures::Ds(
                self.backbone
                    .extract_all_experts(images, opts)?
                    .iter()
                    .map(FeatureMapSet::detach)
                    .collect(),
            ),
            Stream::Di => StreamFeatures::Di(self.backbone.extract_invariant(images, opts)?.detach()),
        })
    }

    /// Features of arbitrarily many images, extracted in fixed-size chunks.
    pub fn features_for(&self, images: &[&RgbImage], norm: &PixelNorm, stream: Stream) -> Result<StreamFeatures> {
        if images.is_empty() {
            return Err(Error::Data("no images to extract features from".into()));
        }
        let mut parts = Vec::new();
        for chunk in images.chunks(FEATURE_CHUNK) {
            parts.push(self.features(&self.input(chunk, norm)?, stream)?);
        }
        Ok(match stream {
            Stream::Ds => {
                let k = self.domains();
                let mut per_expert = Vec::with_capacity(k);
                for i in 0..k {
                    let sets: Vec<FeatureMapSet> = parts
                        .iter()
                        .map(|p| match p {
                            StreamFeatures::Ds(s) => s[i].clone(),
                            StreamFeatures::Di(_) => unreachable!(),
                        })
                        .collect();
                    per_expert.push(FeatureMapSet::cat(&sets)?);
                }
                StreamFeatures::Ds(per_expert)
            }
            Stream::Di => {
                let sets: Vec<FeatureMapSet> = parts
                    .into_iter()
                    .map(|p| match p {
                        StreamFeatures::Di(s) => s,
                        StreamFeatures::Ds(_) => unreachable!(),
                    })
                    .collect();
                StreamFeatures::Di(FeatureMapSet::cat(&sets)?)
            }
        })
    }

    /// Scores `[N, M]` of the stream's final matcher: domain-adaptive
    /// matching for DS features, the invariant head for DI features.
    pub fn score(
        &self,
        query: &StreamFeatures,
        gallery: &StreamFeatures,
        mode: BnMode,
        grad: Grad,
    ) -> Result<Tensor> {
        let cfg = &self.config.matching;
        match (query, gallery) {
            (StreamFeatures::Ds(q), StreamFeatures::Ds(g)) => match self.config.mixing {
                Mixing::Attention => msda_qaconv_scores(
                    q,
                    g,
                    MixWeights::Learned(&self.attention),
                    &self.msda_head,
                    cfg,
                    mode,
                    grad,
                ),
                Mixing::Average => {
                    msda_qaconv_scores(q, g, MixWeights::Uniform, &self.msda_head, cfg, mode, grad)
                }
                Mixing::Voting => voting_scores(q, g, &self.ds_head, cfg, mode, grad),
            },
            (StreamFeatures::Di(q), StreamFeatures::Di(g)) => {
                ms_qaconv_scores(q, g, &self.di_head, cfg, mode, grad)
            }
            _ => Err(Error::Shape("query and gallery features come from different streams".into())),
        }
    }

    /// Eval-mode score matrix; query rows are processed in chunks so memory
    /// stays bounded, every feature is extracted once.
    pub fn pairwise_scores(&self, query: &StreamFeatures, gallery: &StreamFeatures) -> Result<ScoreMatrix> {
        let (q, g) = (query.len(), gallery.len());
        if q == 0 || g == 0 {
            return Err(Error::Data("pairwise scoring needs non-empty query and gallery".into()));
        }
        let mut values = Vec::with_capacity(q * g);
        let mut start = 0;
        while start < q {
            let len = QUERY_CHUNK.min(q - start);
            let qc = query.narrow(start, len)?;
            let s = self.score(&qc, gallery, BnMode::Eval, Grad::Stop)?;
            values.extend(crate::nn::to_f64_vec(&s)?);
            start += len;
        }
        ScoreMatrix::new(q, g, values)
    }

    /// [`Self::pairwise_scores`] with labels attached.
    pub fn similarity_matrix(
        &self,
        query: &StreamFeatures,
        gallery: &StreamFeatures,
        query_labels: Vec<ImageLabel>,
        gallery_labels: Vec<ImageLabel>,
    ) -> Result<SimilarityMatrix> {
        if query_labels.len() != query.len() || gallery_labels.len() != gallery.len() {
            return Err(Error::Shape("label count differs from feature count".into()));
        }
        Ok(SimilarityMatrix {
            scores: self.pairwise_scores(query, gallery)?,
            query_labels,
            gallery_labels,
        })
    }
}

impl StateDict for TalModel {
    fn collect_state(&self, prefix: &str, out: &mut Vec<NamedTensor>) {
        for g in self.groups() {
            for mut t in self.group_state(g) {
                if !prefix.is_empty() {
                    t.name = format!("{prefix}.{}", t.name);
                }
                out.push(t);
            }
        }
    }
}
