//! The three-phase training procedure, its optimizer and schedule.
//!
//! Phase A trains the shared convolutions, one domain's expert and the
//! domain-specific head on batches from that domain. Phase B trains the
//! domain-adaptive matcher on hybrid batches with the backbone frozen.
//! Phase C trains the invariant normalization and its head, again with the
//! convolutions and experts frozen.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::ForwardOptions;
use crate::checkpoint::{Checkpoint, CheckpointHeader};
use crate::config::ExperimentConfig;
use crate::data::{augment, hybrid_view, images_to_tensor, AugmentConfig, PixelNorm, ReidDataset};
use crate::loss::{batch_hard_triplet, LabeledSimilarityBatch, TripletOutput};
use crate::matching::{ms_qaconv_scores, Mixing};
use crate::model::{ParamGroup, Stream, StreamFeatures, TalModel};
use crate::nn::{BnMode, Grad};
use crate::sampling::{build_class_graph, next_batch, BatchRef, ClassGraph, SamplerConfig, SamplerKind};
use crate::state::{hash_state, NamedTensor, TensorKind};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// The rate is divided by `decay_factor` for every epoch after this one.
    pub decay_epoch: usize,
    pub decay_factor: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub margin: f64,
    /// Relative step counts of phases A, B, C.
    pub phase_ratio: [usize; 3],
    /// Steps per ratio unit; `None` means one pass over the hybrid set.
    pub steps_per_epoch: Option<usize>,
    pub seed: u64,
    pub augment: AugmentConfig,
    /// Hash every group a phase must not touch before and after each step.
    pub verify_isolation: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 0.005,
            decay_epoch: 20,
            decay_factor: 10.0,
            weight_decay: 5e-4,
            momentum: 0.9,
            margin: 16.0,
            phase_ratio: [1, 1, 1],
            steps_per_epoch: None,
            seed: 0,
            augment: AugmentConfig::default(),
            verify_isolation: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.decay_epoch >= self.epochs {
            return bad(format!(
                "lr decay epoch {} must be below the epoch count {}",
                self.decay_epoch, self.epochs
            ));
        }
        if !(self.lr > 0.0 && self.decay_factor > 0.0) {
            return bad("learning rate and decay factor must be positive".into());
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return bad("momentum must lie in [0, 1) and weight decay be non-negative".into());
        }
        if self.phase_ratio.iter().all(|&r| r == 0) {
            return bad("at least one phase needs a non-zero step ratio".into());
        }
        if self.steps_per_epoch == Some(0) {
            return bad("steps per epoch must be positive".into());
        }
        Ok(())
    }

    /// Learning rate of a 1-based epoch.
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        if epoch > self.decay_epoch {
            self.lr / self.decay_factor
        } else {
            self.lr
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    A,
    B,
    C,
}

impl Phase {
    /// Groups a step of this phase may change.
    pub fn updates(self, domain: usize) -> Vec<ParamGroup> {
        match self {
            Phase::A => vec![ParamGroup::BackboneConv, ParamGroup::Dsbn(domain), ParamGroup::DsHead],
            Phase::B => vec![ParamGroup::Msda],
            Phase::C => vec![ParamGroup::InvariantNorm, ParamGroup::DiHead],
        }
    }
}

/// SGD with momentum and L2 weight decay, applied only to the tensors it is
/// handed.
#[derive(Debug, Clone, Default)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        }
    }

    /// Parameters without a gradient are left alone; buffers are skipped.
    pub fn step(&mut self, params: &[NamedTensor], grads: &GradStore, lr: f64) -> Result<()> {
        for p in params.iter().filter(|p| p.kind == TensorKind::Param) {
            let Some(g) = grads.get(p.var.as_tensor()) else {
                continue;
            };
            let w = p.var.as_tensor().detach();
            let g = (g.detach() + (&w * self.weight_decay)?)?;
            let v = match self.velocity.get(&p.name) {
                Some(v) => ((v * self.momentum)? + g)?.detach(),
                None => g,
            };
            p.var.set(&(&w - (&v * lr)?)?)?;
            self.velocity.insert(p.name.clone(), v);
        }
        Ok(())
    }

    pub fn velocity(&self) -> &BTreeMap<String, Tensor> {
        &self.velocity
    }

    pub fn set_velocity(&mut self, velocity: BTreeMap<String, Tensor>) {
        self.velocity = velocity;
    }
}

/// Model input of one step.
#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub domains: Vec<usize>,
}

pub fn assemble_batch<R: rand::Rng + ?Sized>(
    dataset: &ReidDataset,
    refs: &[BatchRef],
    aug: &AugmentConfig,
    norm: &PixelNorm,
    rng: &mut R,
    dtype: DType,
    device: &Device,
) -> Result<Batch> {
    let images: Vec<_> = refs
        .iter()
        .map(|r| augment(&dataset.records[r.record].image, aug, rng))
        .collect();
    let views: Vec<_> = images.iter().collect();
    Ok(Batch {
        images: images_to_tensor(&views, norm, dtype, device)?,
        labels: refs.iter().map(|r| r.identity).collect(),
        domains: refs.iter().map(|r| r.domain).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub phase: Phase,
    pub epoch: usize,
    pub step: usize,
    pub domain: Option<usize>,
    pub loss: f64,
    pub active_fraction: f64,
    pub lr: f64,
}

/// Per-epoch, per-phase means written to the metrics log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub steps: usize,
    pub loss: f64,
    pub active_fraction: f64,
    pub lr: f64,
}

/// Source domains and their hybrid union.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub domains: Vec<ReidDataset>,
    pub hybrid: ReidDataset,
    domain_members: Vec<Vec<Vec<usize>>>,
    hybrid_members: Vec<Vec<usize>>,
}

impl TrainData {
    /// Datasets must carry domain ids `0..K` in order.
    pub fn new(domains: Vec<ReidDataset>) -> Result<Self> {
        let hybrid = hybrid_view(&domains)?;
        Self::with_hybrid(domains, hybrid)
    }

    /// For camera-as-domain sources, where one identity spans several
    /// domains and the hybrid set keeps it linked.
    pub fn with_hybrid(domains: Vec<ReidDataset>, hybrid: ReidDataset) -> Result<Self> {
        for (i, d) in domains.iter().enumerate() {
            if d.is_empty() {
                return Err(Error::Data(format!("training domain {} is empty", i + 1)));
            }
            if d.records.iter().any(|r| r.domain != i) {
                return Err(Error::Data(format!(
                    "{} holds records outside domain {}",
                    d.name,
                    i + 1
                )));
            }
        }
        let domain_members = domains.iter().map(ReidDataset::class_members).collect();
        let hybrid_members = hybrid.class_members();
        Ok(Self {
            domains,
            hybrid,
            domain_members,
            hybrid_members,
        })
    }

    pub fn num_domains(&self) -> usize {
        self.domains.len()
    }
}

/// Class graphs of every source domain and of the hybrid set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainGraphs {
    pub domains: Vec<ClassGraph>,
    pub hybrid: ClassGraph,
}

/// Invariant-stream scores between prototype images.
pub fn invariant_prototype_scores(
    model: &TalModel,
    norm: &PixelNorm,
    dataset: &ReidDataset,
    prototypes: &[usize],
) -> Result<Vec<f64>> {
    let images: Vec<_> = prototypes.iter().map(|&i| dataset.records[i].image.as_ref()).collect();
    let feats = model.features_for(&images, norm, Stream::Di)?;
    Ok(model.pairwise_scores(&feats, &feats)?.values)
}

pub struct Trainer {
    pub model: TalModel,
    config: ExperimentConfig,
    train: TrainConfig,
    sampler: SamplerConfig,
    norm: PixelNorm,
    optimizer: Sgd,
    rng: ChaCha8Rng,
    epoch: usize,
    global_step: usize,
    graphs: Option<TrainGraphs>,
    pub history: Vec<StepStats>,
}

impl Trainer {
    pub fn new(config: &ExperimentConfig, domains: usize) -> Result<Self> {
        config.validate()?;
        let model = TalModel::new(&config.model_config(), domains, config.seed, DType::F32, &Device::Cpu)?;
        Ok(Self::assemble(config, model, ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1))))
    }

    fn assemble(config: &ExperimentConfig, model: TalModel, rng: ChaCha8Rng) -> Self {
        let train = config.train_config();
        Self {
            model,
            optimizer: Sgd::new(train.momentum, train.weight_decay),
            train,
            sampler: config.sampler_config(),
            norm: config.pixel_norm(),
            config: config.clone(),
            rng,
            epoch: 0,
            global_step: 0,
            graphs: None,
            history: Vec::new(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        Self::resume(ckpt, &ckpt.header.config)
    }

    /// Restores a checkpoint under `config`, which may differ from the
    /// stored one only in epoch count and output directory.
    pub fn resume(ckpt: &Checkpoint, config: &ExperimentConfig) -> Result<Self> {
        let h = &ckpt.header;
        if h.config.resume_hash()? != config.resume_hash()? {
            return Err(Error::Checkpoint(
                "checkpoint was written under a different configuration".into(),
            ));
        }
        config.validate()?;
        let model = TalModel::new(&config.model_config(), h.domains, config.seed, DType::F32, &Device::Cpu)?;
        ckpt.load_model_state(&model)?;
        let mut t = Self::assemble(config, model, h.rng.clone());
        t.optimizer.set_velocity(ckpt.momentum(&Device::Cpu, DType::F32)?);
        t.epoch = h.epoch;
        t.global_step = h.global_step;
        t.graphs = h.graphs.clone();
        Ok(t)
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn global_step(&self) -> usize {
        self.global_step
    }

    pub fn graphs(&self) -> Option<&TrainGraphs> {
        self.graphs.as_ref()
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::capture(
            CheckpointHeader::new(
                &self.config,
                self.model.domains(),
                self.epoch,
                self.global_step,
                self.rng.clone(),
                self.graphs.clone(),
            )?,
            &self.model,
            self.optimizer.velocity(),
        )
    }

    fn hash_groups(&self, groups: &[ParamGroup]) -> Result<Vec<String>> {
        groups.iter().map(|&g| hash_state(&self.model.group_state(g))).collect()
    }

    fn frozen_groups(&self, phase: Phase, domain: usize) -> Vec<ParamGroup> {
        let live = phase.updates(domain);
        self.model.groups().into_iter().filter(|g| !live.contains(g)).collect()
    }

    fn apply(&mut self, phase: Phase, domain: usize, loss: &TripletOutput, lr: f64) -> Result<()> {
        let frozen = self.frozen_groups(phase, domain);
        let before = if self.train.verify_isolation {
            Some(self.hash_groups(&frozen)?)
        } else {
            None
        };
        let grads = loss.loss.backward()?;
        let params: Vec<NamedTensor> = phase
            .updates(domain)
            .into_iter()
            .flat_map(|g| self.model.group_state(g))
            .collect();
        self.optimizer.step(&params, &grads, lr)?;
        if let Some(before) = before {
            let after = self.hash_groups(&frozen)?;
            for ((g, b), a) in frozen.iter().zip(&before).zip(&after) {
                if b != a {
                    return Err(Error::Isolation(format!("phase {phase:?} changed {g:?}")));
                }
            }
        }
        Ok(())
    }

    fn record(&mut self, phase: Phase, domain: Option<usize>, out: &TripletOutput, lr: f64) -> StepStats {
        self.global_step += 1;
        let s = StepStats {
            phase,
            epoch: self.epoch + 1,
            step: self.global_step,
            domain,
            loss: out.value,
            active_fraction: out.active_fraction(),
            lr,
        };
        self.history.push(s);
        s
    }

    fn loss(&self, scores: &Tensor, labels: &[usize]) -> Result<TripletOutput> {
        batch_hard_triplet(&LabeledSimilarityBatch {
            scores,
            labels,
            margin: self.train.margin,
        })
    }

    /// Expert `domain` in train mode, domain-specific matching head.
    pub fn phase_a_step(&mut self, batch: &Batch, domain: usize, lr: f64) -> Result<StepStats> {
        if let Some(d) = batch.domains.iter().find(|&&d| d != domain) {
            return Err(Error::Sampler(format!(
                "phase A batch for domain {} holds an image of domain {}",
                domain + 1,
                d + 1
            )));
        }
        let opts = ForwardOptions {
            bn_mode: BnMode::Train,
            conv_grad: Grad::Track,
            norm_grad: Grad::Track,
        };
        let feats = self.model.backbone.extract_expert(&batch.images, domain, opts)?;
        let scores = ms_qaconv_scores(
            &feats,
            &feats,
            &self.model.ds_head,
            &self.model.config().matching,
            BnMode::Train,
            Grad::Track,
        )?;
        let out = self.loss(&scores, &batch.labels)?;
        self.apply(Phase::A, domain, &out, lr)?;
        Ok(self.record(Phase::A, Some(domain), &out, lr))
    }

    /// All experts with frozen statistics; only the domain-adaptive matcher
    /// learns. Voting has nothing to learn here and returns `None`.
    pub fn phase_b_step(&mut self, batch: &Batch, lr: f64) -> Result<Option<StepStats>> {
        if self.model.config().mixing == Mixing::Voting {
            return Ok(None);
        }
        let feats = self.model.features(&batch.images, Stream::Ds)?;
        let scores = self.model.score(&feats, &feats, BnMode::Train, Grad::Track)?;
        let out = self.loss(&scores, &batch.labels)?;
        self.apply(Phase::B, 0, &out, lr)?;
        Ok(Some(self.record(Phase::B, None, &out, lr)))
    }

    /// Invariant stream over frozen convolutions and experts.
    pub fn phase_c_step(&mut self, batch: &Batch, lr: f64) -> Result<StepStats> {
        let opts = ForwardOptions {
            bn_mode: BnMode::Train,
            conv_grad: Grad::Stop,
            norm_grad: Grad::Track,
        };
        let feats = StreamFeatures::Di(self.model.backbone.extract_invariant(&batch.images, opts)?);
        let scores = self.model.score(&feats, &feats, BnMode::Train, Grad::Track)?;
        let out = self.loss(&scores, &batch.labels)?;
        self.apply(Phase::C, 0, &out, lr)?;
        Ok(self.record(Phase::C, None, &out, lr))
    }

    fn refresh_graphs(&mut self, data: &TrainData) -> Result<()> {
        let due = self.epoch.is_multiple_of(self.sampler.refresh_epochs) || self.graphs.is_none();
        if self.sampler.kind != SamplerKind::Graph || !due {
            return Ok(());
        }
        let (model, norm) = (&self.model, &self.norm);
        let mut scorer = |d: &ReidDataset, p: &[usize]| invariant_prototype_scores(model, norm, d, p);
        let mut domains = Vec::with_capacity(data.num_domains());
        for d in &data.domains {
            domains.push(build_class_graph(d, &mut scorer, &self.sampler, &mut self.rng)?);
        }
        let hybrid = build_class_graph(&data.hybrid, &mut scorer, &self.sampler, &mut self.rng)?;
        self.graphs = Some(TrainGraphs { domains, hybrid });
        Ok(())
    }

    /// Next batch from one domain (`Some`) or from the hybrid set, using the
    /// current class graphs when there are any.
    pub fn draw_batch(&mut self, data: &TrainData, domain: Option<usize>) -> Result<Batch> {
        let (dataset, members, graph) = match domain {
            Some(d) => (
                &data.domains[d],
                &data.domain_members[d],
                self.graphs.as_ref().map(|g| &g.domains[d]),
            ),
            None => (&data.hybrid, &data.hybrid_members, self.graphs.as_ref().map(|g| &g.hybrid)),
        };
        let refs = next_batch(graph, dataset, members, &self.sampler, &mut self.rng)?;
        let mut batch = assemble_batch(
            dataset,
            &refs,
            &self.train.augment,
            &self.norm,
            &mut self.rng,
            self.model.dtype(),
            self.model.device(),
        )?;
        if domain.is_none() {
            // hybrid batches keep their labels out of the model path
            batch.domains.clear();
        }
        Ok(batch)
    }

    pub fn steps_per_unit(&self, data: &TrainData) -> usize {
        self.train
            .steps_per_epoch
            .unwrap_or_else(|| data.hybrid.len().div_ceil(self.sampler.batch_size))
    }

    /// Runs the next epoch: phase A cycling the domains, then B, then C.
    pub fn train_epoch(&mut self, data: &TrainData) -> Result<Vec<PhaseRecord>> {
        if data.num_domains() != self.model.domains() {
            return Err(Error::Data(format!(
                "model has {} domains, training data {}",
                self.model.domains(),
                data.num_domains()
            )));
        }
        self.refresh_graphs(data)?;
        let epoch = self.epoch + 1;
        let lr = self.train.learning_rate(epoch);
        let unit = self.steps_per_unit(data);
        let [ra, rb, rc] = self.train.phase_ratio;
        let start = self.history.len();
        for s in 0..ra * unit {
            let d = s % data.num_domains();
            let batch = self.draw_batch(data, Some(d))?;
            self.phase_a_step(&batch, d, lr)?;
        }
        for _ in 0..rb * unit {
            let batch = self.draw_batch(data, None)?;
            if self.phase_b_step(&batch, lr)?.is_none() {
                break;
            }
        }
        for _ in 0..rc * unit {
            let batch = self.draw_batch(data, None)?;
            self.phase_c_step(&batch, lr)?;
        }
        self.epoch = epoch;
        let steps = &self.history[start..];
        let records = [Phase::A, Phase::B, Phase::C]
            .into_iter()
            .filter_map(|phase| {
                let of: Vec<_> = steps.iter().filter(|s| s.phase == phase).collect();
                (!of.is_empty()).then(|| PhaseRecord {
                    epoch,
                    phase,
                    steps: of.len(),
                    loss: of.iter().map(|s| s.loss).sum::<f64>() / of.len() as f64,
                    active_fraction: of.iter().map(|s| s.active_fraction).sum::<f64>() / of.len() as f64,
                    lr,
                })
            })
            .collect();
        Ok(records)
    }
}

/// Where [`train`] writes its artifacts.
#[derive(Debug, Clone)]
pub struct TrainOutputs {
    pub dir: PathBuf,
}

impl TrainOutputs {
    pub fn checkpoint(&self) -> PathBuf {
        self.dir.join("checkpoint.tal")
    }

    pub fn epoch_checkpoint(&self, epoch: usize) -> PathBuf {
        self.dir.join("checkpoints").join(format!("epoch_{epoch:03}.tal"))
    }

    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.jsonl")
    }

    pub fn steps(&self) -> PathBuf {
        self.dir.join("steps.jsonl")
    }
}

fn append_lines<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    for r in rows {
        let line = serde_json::to_string(r)?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Trains until the configured epoch count, continuing `resume` when given.
/// With `outputs`, writes a checkpoint and metrics lines after every epoch.
pub fn train(
    config: &ExperimentConfig,
    data: &TrainData,
    outputs: Option<&TrainOutputs>,
    resume: Option<&Checkpoint>,
) -> Result<Trainer> {
    let mut trainer = match resume {
        Some(ckpt) => Trainer::resume(ckpt, config)?,
        None => Trainer::new(config, data.num_domains())?,
    };
    if let Some(out) = outputs {
        fs::create_dir_all(out.dir.join("checkpoints")).map_err(|e| Error::io(&out.dir, e))?;
    }
    while trainer.epoch() < config.epochs {
        let start = trainer.history.len();
        let records = trainer.train_epoch(data)?;
        for r in &records {
            log::info!(
                "epoch {} phase {:?}: loss {:.4} active {:.3} lr {}",
                r.epoch,
                r.phase,
                r.loss,
                r.active_fraction,
                r.lr
            );
        }
        if let Some(out) = outputs {
            append_lines(&out.metrics(), &records)?;
            append_lines(&out.steps(), &trainer.history[start..])?;
            let ckpt = trainer.checkpoint()?;
            ckpt.save(&out.epoch_checkpoint(trainer.epoch()))?;
            ckpt.save(&out.checkpoint())?;
        }
    }
    Ok(trainer)
}
