//! Flat, versioned experiment configuration.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::BackboneConfig;
use crate::data::{AugmentConfig, Layout, PixelNorm, SyntheticConfig};
use crate::evaluation::FusionMode;
use crate::matching::{Direction, MatchConfig, Mixing};
use crate::model::ModelConfig;
use crate::norm::NormMode;
use crate::sampling::{SamplerConfig, SamplerKind};
use crate::training::TrainConfig;
use crate::{Error, Result};

pub const CONFIG_VERSION: u32 = 1;

/// Every experiment setting as one flat key-value document. Relative paths
/// are resolved against the output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub seed: u64,
    pub output_dir: PathBuf,

    pub data_root: PathBuf,
    pub data_layout: Layout,
    /// Sub-directories of `data_root` holding the source domains.
    pub train_domains: Vec<String>,
    pub target_domain: String,
    /// Treat every camera of a source as its own domain.
    pub camera_as_domain: bool,

    pub syn_ids_per_domain: usize,
    pub syn_images_per_id: usize,
    pub syn_target_ids: usize,
    pub syn_target_images_per_id: usize,
    pub syn_cameras: u32,
    pub syn_min_style_gap: f64,

    pub input_height: usize,
    pub input_width: usize,
    pub pixel_mean: [f32; 3],
    pub pixel_std: [f32; 3],

    pub stem_channels: Vec<usize>,
    pub stem_strides: Vec<usize>,
    pub stage_channels: Vec<usize>,
    pub stage_strides: Vec<usize>,
    pub di_norm: NormMode,
    pub reduction: usize,

    /// 1-based stage numbers.
    pub scales: Vec<usize>,
    pub direction: Direction,
    pub per_scale_heads: bool,
    pub ds_mixing: Mixing,
    pub fusion: FusionMode,

    pub batch_size: usize,
    pub ids_per_batch: usize,
    pub instances_per_id: usize,
    pub sampler: SamplerKind,
    pub graph_neighbors: usize,
    pub graph_refresh_epochs: usize,

    pub epochs: usize,
    pub lr: f64,
    pub lr_decay_epoch: usize,
    pub lr_decay_factor: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub margin: f64,
    /// Steps of phases A, B and C per epoch unit.
    pub phase_ratio: [usize; 3],
    /// Steps per epoch unit; 0 means one pass over the hybrid set.
    pub steps_per_epoch: usize,
    pub augment: bool,
    pub flip_prob: f64,
    pub crop_pad: u32,
    pub brightness: f64,
    pub saturation: f64,
    pub hue: f64,
    pub verify_isolation: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let backbone = BackboneConfig::default();
        let sampler = SamplerConfig::default();
        let train = TrainConfig::default();
        let aug = AugmentConfig::default();
        let pixel = PixelNorm::default();
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            data_root: PathBuf::from("data"),
            data_layout: Layout::Market,
            train_domains: vec!["domain1".into(), "domain2".into(), "domain3".into()],
            target_domain: "target".into(),
            camera_as_domain: false,
            syn_ids_per_domain: 50,
            syn_images_per_id: 8,
            syn_target_ids: 30,
            syn_target_images_per_id: 8,
            syn_cameras: 2,
            syn_min_style_gap: 0.02,
            input_height: backbone.input_height,
            input_width: backbone.input_width,
            pixel_mean: pixel.mean,
            pixel_std: pixel.std,
            stem_channels: backbone.stem_channels,
            stem_strides: backbone.stem_strides,
            stage_channels: backbone.stage_channels,
            stage_strides: backbone.stage_strides,
            di_norm: backbone.norm_mode,
            reduction: backbone.reduction,
            scales: vec![1, 2],
            direction: Direction::Bidirectional,
            per_scale_heads: false,
            ds_mixing: Mixing::Attention,
            fusion: FusionMode::Sum,
            batch_size: sampler.batch_size,
            ids_per_batch: sampler.ids_per_batch,
            instances_per_id: sampler.instances,
            sampler: sampler.kind,
            graph_neighbors: sampler.neighbors,
            graph_refresh_epochs: sampler.refresh_epochs,
            epochs: train.epochs,
            lr: train.lr,
            lr_decay_epoch: train.decay_epoch,
            lr_decay_factor: train.decay_factor,
            weight_decay: train.weight_decay,
            momentum: train.momentum,
            margin: train.margin,
            phase_ratio: train.phase_ratio,
            steps_per_epoch: 0,
            augment: true,
            flip_prob: aug.flip_prob,
            crop_pad: aug.pad,
            brightness: aug.brightness,
            saturation: aug.saturation,
            hue: aug.hue,
            verify_isolation: false,
        }
    }
}

impl ExperimentConfig {
    /// Small profile: 48×16 input, 8×4 batches, 10 epochs of 20 steps per
    /// phase.
    pub fn tiny() -> Self {
        Self {
            input_height: 48,
            input_width: 16,
            batch_size: 32,
            ids_per_batch: 8,
            instances_per_id: 4,
            graph_neighbors: 7,
            epochs: 10,
            lr_decay_epoch: 7,
            steps_per_epoch: 20,
            ..Self::default()
        }
    }

    /// Parses a config file. Every key except `margin` may be omitted and
    /// takes its default; unknown keys are rejected.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: toml::Table =
            text.parse().map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        if !file.contains_key("margin") {
            return Err(Error::Config("`margin` must be set explicitly".into()));
        }
        let mut table = toml::Table::try_from(Self::default())
            .map_err(|e| Error::Config(format!("cannot encode defaults: {e}")))?;
        for (k, v) in file {
            if !table.contains_key(&k) {
                return Err(Error::Config(format!("unknown config key `{k}`")));
            }
            table.insert(k, v);
        }
        let cfg: Self = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot encode config: {e}")))
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> Result<String> {
        let bytes = serde_json::to_vec(self)?;
        Ok(crate::state::hex(&Sha256::digest(bytes)))
    }

    /// Hash of everything a resumed run must share with the original: the
    /// epoch count and output directory may change.
    pub fn resume_hash(&self) -> Result<String> {
        Self {
            epochs: 0,
            output_dir: PathBuf::new(),
            ..self.clone()
        }
        .hash()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.version != CONFIG_VERSION {
            return bad(format!("config version {} is not supported (expected {CONFIG_VERSION})", self.version));
        }
        if self.train_domains.is_empty() {
            return bad("at least one training domain is required".into());
        }
        if self.scales.is_empty() || self.scales.iter().any(|&s| s == 0 || s > self.stage_channels.len()) {
            return bad(format!(
                "scales {:?} must be stage numbers in 1..={}",
                self.scales,
                self.stage_channels.len()
            ));
        }
        if self.pixel_std.iter().any(|&s| s <= 0.0) {
            return bad("pixel_std entries must be positive".into());
        }
        if !(self.margin.is_finite() && self.margin > 0.0) {
            return bad("margin must be a finite positive number".into());
        }
        self.backbone_config().validate()?;
        self.sampler_config().validate()?;
        self.train_config().validate()?;
        self.synthetic_config().validate()
    }

    pub fn backbone_config(&self) -> BackboneConfig {
        BackboneConfig {
            input_height: self.input_height,
            input_width: self.input_width,
            stem_channels: self.stem_channels.clone(),
            stem_strides: self.stem_strides.clone(),
            stage_channels: self.stage_channels.clone(),
            stage_strides: self.stage_strides.clone(),
            norm_mode: self.di_norm,
            reduction: self.reduction,
        }
    }

    pub fn match_config(&self) -> MatchConfig {
        MatchConfig {
            scales: self.scales.iter().map(|s| s.saturating_sub(1)).collect(),
            direction: self.direction,
            per_scale_heads: self.per_scale_heads,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone_config(),
            matching: self.match_config(),
            mixing: self.ds_mixing,
        }
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            batch_size: self.batch_size,
            ids_per_batch: self.ids_per_batch,
            instances: self.instances_per_id,
            neighbors: self.graph_neighbors,
            refresh_epochs: self.graph_refresh_epochs,
            kind: self.sampler,
        }
    }

    pub fn augment_config(&self) -> AugmentConfig {
        if !self.augment {
            return AugmentConfig::none();
        }
        AugmentConfig {
            flip_prob: self.flip_prob,
            pad: self.crop_pad,
            brightness: self.brightness,
            saturation: self.saturation,
            hue: self.hue,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            lr: self.lr,
            decay_epoch: self.lr_decay_epoch,
            decay_factor: self.lr_decay_factor,
            weight_decay: self.weight_decay,
            momentum: self.momentum,
            margin: self.margin,
            phase_ratio: self.phase_ratio,
            steps_per_epoch: (self.steps_per_epoch > 0).then_some(self.steps_per_epoch),
            seed: self.seed,
            augment: self.augment_config(),
            verify_isolation: self.verify_isolation,
        }
    }

    pub fn synthetic_config(&self) -> SyntheticConfig {
        SyntheticConfig {
            domains: self.train_domains.len(),
            ids_per_domain: self.syn_ids_per_domain,
            images_per_id: self.syn_images_per_id,
            target_ids: self.syn_target_ids,
            target_images_per_id: self.syn_target_images_per_id,
            height: self.input_height as u32,
            width: self.input_width as u32,
            cameras: self.syn_cameras,
            seed: self.seed,
            styles: Vec::new(),
            min_style_gap: self.syn_min_style_gap,
        }
    }

    pub fn pixel_norm(&self) -> PixelNorm {
        PixelNorm {
            mean: self.pixel_mean,
            std: self.pixel_std,
        }
    }

    /// `path` itself when absolute, otherwise joined onto the output dir.
    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.output_dir.join(path)
        }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.resolve(&self.data_root)
    }
}
