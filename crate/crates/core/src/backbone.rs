//! Configurable plain CNN whose normalization sites hold a per-domain expert
//! bank and the invariant-stream normalization.

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{normal, param, BnMode, Grad};
use crate::norm::{DsbnBank, InvariantNorm, NormMode, DEFAULT_REDUCTION};
use crate::state::{push_param, NamedTensor};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub input_height: usize,
    pub input_width: usize,
    /// Conv blocks before the first tapped stage.
    pub stem_channels: Vec<usize>,
    pub stem_strides: Vec<usize>,
    /// One conv block per stage; every stage output is a matching scale.
    pub stage_channels: Vec<usize>,
    pub stage_strides: Vec<usize>,
    /// Normalization of the domain-invariant stream.
    pub norm_mode: NormMode,
    /// Bottleneck reduction of the adaptive normalization heads.
    pub reduction: usize,
}

impl Default for BackboneConfig {
    /// 96×32 input, four conv blocks, stages of 24×8 and 12×4.
    fn default() -> Self {
        Self {
            input_height: 96,
            input_width: 32,
            stem_channels: vec![16, 32],
            stem_strides: vec![2, 2],
            stage_channels: vec![32, 64],
            stage_strides: vec![1, 2],
            norm_mode: NormMode::Adaptive,
            reduction: DEFAULT_REDUCTION,
        }
    }
}

fn conv_out(size: usize, stride: usize) -> usize {
    // 3×3 kernel, padding 1
    (size - 1) / stride + 1
}

impl BackboneConfig {
    pub fn num_stages(&self) -> usize {
        self.stage_channels.len()
    }

    fn blocks(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.stem_channels
            .iter()
            .copied()
            .zip(self.stem_strides.iter().copied())
            .chain(
                self.stage_channels
                    .iter()
                    .copied()
                    .zip(self.stage_strides.iter().copied()),
            )
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.num_stages() < 2 {
            return bad(format!("need at least 2 stages, got {}", self.num_stages()));
        }
        if self.stem_channels.len() != self.stem_strides.len() {
            return bad("stem_channels and stem_strides differ in length".into());
        }
        if self.stage_channels.len() != self.stage_strides.len() {
            return bad("stage_channels and stage_strides differ in length".into());
        }
        if self.blocks().any(|(c, s)| c == 0 || s == 0) {
            return bad("channel counts and strides must be positive".into());
        }
        if self.input_height == 0 || self.input_width == 0 {
            return bad("input resolution must be positive".into());
        }
        if self.reduction == 0 {
            return bad("reduction rate must be positive".into());
        }
        Ok(())
    }

    /// Spatial size `(height, width)` of every stage output.
    pub fn stage_sizes(&self) -> Vec<(usize, usize)> {
        let (mut h, mut w) = (self.input_height, self.input_width);
        let stem = self.stem_channels.len();
        let mut out = Vec::new();
        for (j, (_, s)) in self.blocks().enumerate() {
            h = conv_out(h, s);
            w = conv_out(w, s);
            if j >= stem {
                out.push((h, w));
            }
        }
        out
    }
}

/// Which normalization path a forward pass takes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DomainSelector {
    /// Expert `i` (0-based) at every site.
    Expert(usize),
    /// All K experts; the convolutions run once over the K stacked paths.
    AllExperts,
    /// The invariant-stream normalization at every site.
    Invariant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardOptions {
    pub bn_mode: BnMode,
    pub conv_grad: Grad,
    pub norm_grad: Grad,
}

impl ForwardOptions {
    pub const EVAL: Self = Self {
        bn_mode: BnMode::Eval,
        conv_grad: Grad::Stop,
        norm_grad: Grad::Stop,
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamTag {
    Expert(usize),
    Invariant,
}

/// Stage outputs `[B, C_p, H_p, W_p]` for one image batch.
#[derive(Debug, Clone)]
pub struct FeatureMapSet {
    pub maps: Vec<Tensor>,
    pub tag: StreamTag,
}

impl FeatureMapSet {
    pub fn batch_size(&self) -> usize {
        self.maps.first().map(|m| m.dims()[0]).unwrap_or(0)
    }

    pub fn num_stages(&self) -> usize {
        self.maps.len()
    }

    /// Samples `start..start + len` of every stage.
    pub fn narrow(&self, start: usize, len: usize) -> Result<Self> {
        Ok(Self {
            maps: self
                .maps
                .iter()
                .map(|m| m.narrow(0, start, len))
                .collect::<candle_core::Result<_>>()?,
            tag: self.tag,
        })
    }

    /// Concatenate along the batch axis.
    pub fn cat(sets: &[FeatureMapSet]) -> Result<Self> {
        let first = sets
            .first()
            .ok_or_else(|| Error::Shape("no feature maps to concatenate".into()))?;
        let mut maps = Vec::with_capacity(first.maps.len());
        for p in 0..first.maps.len() {
            let parts: Vec<&Tensor> = sets.iter().map(|s| &s.maps[p]).collect();
            maps.push(Tensor::cat(&parts, 0)?);
        }
        Ok(Self {
            maps,
            tag: first.tag,
        })
    }

    pub fn detach(&self) -> Self {
        Self {
            maps: self.maps.iter().map(|m| m.detach()).collect(),
            tag: self.tag,
        }
    }
}

#[derive(Debug)]
pub struct NormSite {
    pub dsbn: DsbnBank,
    pub invariant: InvariantNorm,
}

#[derive(Debug)]
struct ConvBlock {
    weight: Var,
    stride: usize,
    site: NormSite,
}

impl ConvBlock {
    fn conv(&self, x: &Tensor, grad: Grad) -> Result<Tensor> {
        Ok(x.conv2d(&param(&self.weight, grad), 1, self.stride, 1, 1)?)
    }
}

#[derive(Debug)]
pub struct Backbone {
    config: BackboneConfig,
    domains: usize,
    blocks: Vec<ConvBlock>,
}

impl Backbone {
    pub fn new<R: Rng + ?Sized>(
        config: &BackboneConfig,
        domains: usize,
        rng: &mut R,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        config.validate()?;
        if domains == 0 {
            return Err(Error::Config("need at least one source domain".into()));
        }
        let mut blocks = Vec::new();
        let mut c_in = 3;
        for (c_out, stride) in config.blocks() {
            let std = (2.0 / (c_out * 9) as f64).sqrt();
            let weight = Var::from_tensor(&normal(rng, &[c_out, c_in, 3, 3], std, dtype, device)?)?;
            let site = NormSite {
                dsbn: DsbnBank::new(domains, c_out, dtype, device)?,
                invariant: InvariantNorm::new(
                    config.norm_mode,
                    c_out,
                    domains,
                    config.reduction,
                    rng,
                    dtype,
                    device,
                )?,
            };
            blocks.push(ConvBlock {
                weight,
                stride,
                site,
            });
            c_in = c_out;
        }
        Ok(Self {
            config: config.clone(),
            domains,
            blocks,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn domains(&self) -> usize {
        self.domains
    }

    pub fn sites(&self) -> impl Iterator<Item = &NormSite> {
        self.blocks.iter().map(|b| &b.site)
    }

    fn first_stage(&self) -> usize {
        self.config.stem_channels.len()
    }

    fn check_images(&self, images: &Tensor) -> Result<()> {
        let (_, c, h, w) = images.dims4()?;
        if c != 3 {
            return Err(Error::ChannelMismatch { expected: 3, got: c });
        }
        let expected = (self.config.input_height, self.config.input_width);
        if (h, w) != expected {
            return Err(Error::Resolution {
                expected,
                got: (h, w),
            });
        }
        Ok(())
    }

    pub fn extract(
        &self,
        images: &Tensor,
        selector: DomainSelector,
        opts: ForwardOptions,
    ) -> Result<Vec<FeatureMapSet>> {
        Ok(match selector {
            DomainSelector::Expert(i) => vec![self.extract_expert(images, i, opts)?],
            DomainSelector::AllExperts => self.extract_all_experts(images, opts)?,
            DomainSelector::Invariant => vec![self.extract_invariant(images, opts)?],
        })
    }

    pub fn extract_expert(
        &self,
        images: &Tensor,
        domain: usize,
        opts: ForwardOptions,
    ) -> Result<FeatureMapSet> {
        if domain >= self.domains {
            return Err(Error::UnknownDomain {
                index: domain,
                count: self.domains,
            });
        }
        self.run(images, StreamTag::Expert(domain), |site, z| {
            site.dsbn.forward(z, domain, opts.bn_mode, opts.norm_grad)
        }, opts.conv_grad)
    }

    pub fn extract_invariant(&self, images: &Tensor, opts: ForwardOptions) -> Result<FeatureMapSet> {
        self.run(images, StreamTag::Invariant, |site, z| {
            site.invariant.forward(z, &site.dsbn, opts.bn_mode, opts.norm_grad)
        }, opts.conv_grad)
    }

    fn run(
        &self,
        images: &Tensor,
        tag: StreamTag,
        norm: impl Fn(&NormSite, &Tensor) -> Result<Tensor>,
        conv_grad: Grad,
    ) -> Result<FeatureMapSet> {
        self.check_images(images)?;
        let mut h = images.clone();
        let mut maps = Vec::new();
        for (j, block) in self.blocks.iter().enumerate() {
            let z = block.conv(&h, conv_grad)?;
            h = norm(&block.site, &z)?.relu()?;
            if j >= self.first_stage() {
                maps.push(h.clone());
            }
        }
        Ok(FeatureMapSet { maps, tag })
    }

    /// K expert feature sets. The K normalized paths are stacked along the
    /// batch axis so each convolution runs once per block.
    pub fn extract_all_experts(
        &self,
        images: &Tensor,
        opts: ForwardOptions,
    ) -> Result<Vec<FeatureMapSet>> {
        self.check_images(images)?;
        let b = images.dim(0)?;
        let k = self.domains;
        let mut h = images.clone();
        let mut maps: Vec<Vec<Tensor>> = vec![Vec::new(); k];
        for (j, block) in self.blocks.iter().enumerate() {
            let z = block.conv(&h, opts.conv_grad)?;
            let mut parts = Vec::with_capacity(k);
            for i in 0..k {
                let zi = if j == 0 { z.clone() } else { z.narrow(0, i * b, b)? };
                parts.push(block.site.dsbn.forward(&zi, i, opts.bn_mode, opts.norm_grad)?.relu()?);
            }
            if j >= self.first_stage() {
                for (i, p) in parts.iter().enumerate() {
                    maps[i].push(p.clone());
                }
            }
            h = Tensor::cat(&parts, 0)?;
        }
        Ok(maps
            .into_iter()
            .enumerate()
            .map(|(i, maps)| FeatureMapSet {
                maps,
                tag: StreamTag::Expert(i),
            })
            .collect())
    }

    pub fn collect_conv_state(&self, prefix: &str, out: &mut Vec<NamedTensor>) {
        for (j, block) in self.blocks.iter().enumerate() {
            push_param(out, format!("{prefix}.conv{j}.weight"), &block.weight);
        }
    }

    pub fn collect_dsbn_state(&self, prefix: &str, domain: usize, out: &mut Vec<NamedTensor>) {
        for (j, block) in self.blocks.iter().enumerate() {
            block
                .site
                .dsbn
                .collect_domain_state(&format!("{prefix}.site{j}.dsbn"), domain, out);
        }
    }

    pub fn collect_invariant_state(&self, prefix: &str, out: &mut Vec<NamedTensor>) {
        use crate::state::StateDict;
        for (j, block) in self.blocks.iter().enumerate() {
            block
                .site
                .invariant
                .collect_state(&format!("{prefix}.site{j}.di"), out);
        }
    }
}
