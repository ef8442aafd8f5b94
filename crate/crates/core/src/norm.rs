//! Domain-specific batch normalization (one expert per source domain) and the
//! domain-adaptive layer that mixes the experts with input-conditioned
//! weights.

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{param, softmax_last, BnMode, Grad, Linear};
use crate::state::{push_buffer, push_param, NamedTensor, StateDict};
use crate::{Error, Result};

pub const DEFAULT_MOMENTUM: f64 = 0.1;
pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_REDUCTION: usize = 16;

/// K independent batch-norm parameter sets sharing one channel layout.
#[derive(Debug)]
pub struct DsbnBank {
    channels: usize,
    gamma: Vec<Var>,
    beta: Vec<Var>,
    running_mean: Vec<Var>,
    running_var: Vec<Var>,
    momentum: f64,
    eps: f64,
}

impl DsbnBank {
    /// Unit scale, zero shift, zero mean and unit variance for every domain.
    pub fn new(domains: usize, channels: usize, dtype: DType, device: &Device) -> Result<Self> {
        if domains == 0 || channels == 0 {
            return Err(Error::Config(format!(
                "batch-norm bank needs at least one domain and one channel (got {domains}, {channels})"
            )));
        }
        let ones = || -> Result<Var> { Ok(Var::ones(channels, dtype, device)?) };
        let zeros = || -> Result<Var> { Ok(Var::zeros(channels, dtype, device)?) };
        Ok(Self {
            channels,
            gamma: (0..domains).map(|_| ones()).collect::<Result<_>>()?,
            beta: (0..domains).map(|_| zeros()).collect::<Result<_>>()?,
            running_mean: (0..domains).map(|_| zeros()).collect::<Result<_>>()?,
            running_var: (0..domains).map(|_| ones()).collect::<Result<_>>()?,
            momentum: DEFAULT_MOMENTUM,
            eps: DEFAULT_EPS,
        })
    }

    pub fn domains(&self) -> usize {
        self.gamma.len()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn gamma(&self, domain: usize) -> &Var {
        &self.gamma[domain]
    }

    pub fn beta(&self, domain: usize) -> &Var {
        &self.beta[domain]
    }

    pub fn running_mean(&self, domain: usize) -> &Var {
        &self.running_mean[domain]
    }

    pub fn running_var(&self, domain: usize) -> &Var {
        &self.running_var[domain]
    }

    /// Overwrite one domain's affine parameters and running statistics.
    pub fn set_domain(
        &self,
        domain: usize,
        gamma: &Tensor,
        beta: &Tensor,
        mean: &Tensor,
        var: &Tensor,
    ) -> Result<()> {
        self.check_domain(domain)?;
        self.gamma[domain].set(gamma)?;
        self.beta[domain].set(beta)?;
        self.running_mean[domain].set(mean)?;
        self.running_var[domain].set(var)?;
        Ok(())
    }

    fn check_domain(&self, domain: usize) -> Result<()> {
        if domain >= self.domains() {
            return Err(Error::UnknownDomain {
                index: domain,
                count: self.domains(),
            });
        }
        Ok(())
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, c, _, _) = x.dims4()?;
        if c != self.channels {
            return Err(Error::ChannelMismatch {
                expected: self.channels,
                got: c,
            });
        }
        Ok(())
    }

    /// Per-channel `(scale, shift)` of the eval-mode transform of one domain:
    /// `γ (x − μ) / sqrt(σ² + ε) + β = scale · x + shift`.
    pub fn eval_affine(&self, domain: usize, grad: Grad) -> Result<(Tensor, Tensor)> {
        self.check_domain(domain)?;
        let gamma = param(&self.gamma[domain], grad);
        let beta = param(&self.beta[domain], grad);
        let mean = self.running_mean[domain].as_tensor().detach();
        let var = self.running_var[domain].as_tensor().detach();
        let scale = gamma.broadcast_div(&var.affine(1.0, self.eps)?.sqrt()?)?;
        let shift = beta.sub(&scale.mul(&mean)?)?;
        Ok((scale, shift))
    }

    /// Normalize `x` (`[B, C, H, W]`) with domain `domain`'s expert.
    ///
    /// Train mode uses the batch statistics of `x` and folds them into the
    /// running estimates with momentum; eval mode uses the stored estimates.
    pub fn forward(&self, x: &Tensor, domain: usize, mode: BnMode, grad: Grad) -> Result<Tensor> {
        self.check_domain(domain)?;
        self.check_input(x)?;
        let c = self.channels;
        match mode {
            BnMode::Eval => {
                let (scale, shift) = self.eval_affine(domain, grad)?;
                Ok(x
                    .broadcast_mul(&scale.reshape((1, c, 1, 1))?)?
                    .broadcast_add(&shift.reshape((1, c, 1, 1))?)?)
            }
            BnMode::Train => {
                let (b, _, h, w) = x.dims4()?;
                let mean = x.mean_keepdim((0, 2, 3))?;
                let centered = x.broadcast_sub(&mean)?;
                let var = centered.sqr()?.mean_keepdim((0, 2, 3))?;
                let xhat = centered.broadcast_div(&var.affine(1.0, self.eps)?.sqrt()?)?;
                let gamma = param(&self.gamma[domain], grad).reshape((1, c, 1, 1))?;
                let beta = param(&self.beta[domain], grad).reshape((1, c, 1, 1))?;
                let out = xhat.broadcast_mul(&gamma)?.broadcast_add(&beta)?;

                let n = (b * h * w) as f64;
                let unbiased = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
                let m = self.momentum;
                let batch_mean = mean.detach().reshape(c)?;
                let batch_var = var.detach().reshape(c)?.affine(unbiased, 0.0)?;
                let rm = &self.running_mean[domain];
                let rv = &self.running_var[domain];
                rm.set(&(rm.as_tensor().affine(1.0 - m, 0.0)? + batch_mean.affine(m, 0.0)?)?)?;
                rv.set(&(rv.as_tensor().affine(1.0 - m, 0.0)? + batch_var.affine(m, 0.0)?)?)?;
                Ok(out)
            }
        }
    }

    /// State of a single domain expert.
    pub fn collect_domain_state(&self, prefix: &str, domain: usize, out: &mut Vec<NamedTensor>) {
        push_param(out, format!("{prefix}.{domain}.gamma"), &self.gamma[domain]);
        push_param(out, format!("{prefix}.{domain}.beta"), &self.beta[domain]);
        push_buffer(out, format!("{prefix}.{domain}.running_mean"), &self.running_mean[domain]);
        push_buffer(out, format!("{prefix}.{domain}.running_var"), &self.running_var[domain]);
    }
}

impl StateDict for DsbnBank {
    fn collect_state(&self, prefix: &str, out: &mut Vec<NamedTensor>) {
        for i in 0..self.domains() {
            self.collect_domain_state(prefix, i, out);
        }
    }
}

/// Convex mixture `Σ_k α_k DSBN_k(x)` with one α row per sample.
///
/// Every expert is applied with its running statistics, so the mixture
/// collapses to a per-sample, per-channel affine map of `x`.
pub fn mix_experts(x: &Tensor, alpha: &Tensor, bank: &DsbnBank, grad: Grad) -> Result<Tensor> {
    bank.check_input(x)?;
    let (b, c, _, _) = x.dims4()?;
    let (ab, k) = alpha.dims2()?;
    if ab != b || k != bank.domains() {
        return Err(Error::Shape(format!(
            "mixture weights {ab}x{k} do not fit batch {b} with {} domains",
            bank.domains()
        )));
    }
    let mut scales = Vec::with_capacity(k);
    let mut shifts = Vec::with_capacity(k);
    for i in 0..k {
        let (s, t) = bank.eval_affine(i, grad)?;
        scales.push(s);
        shifts.push(t);
    }
    let scale = alpha.matmul(&Tensor::stack(&scales, 0)?)?.reshape((b, c, 1, 1))?;
    let shift = alpha.matmul(&Tensor::stack(&shifts, 0)?)?.reshape((b, c, 1, 1))?;
    Ok(x.broadcast_mul(&scale)?.broadcast_add(&shift)?)
}

/// Squeeze-excitation style predictor of the per-sample domain mixture:
/// `α = softmax(W₂ relu(W₁ avgpool(x)))`.
#[derive(Debug)]
pub struct DabnHead {
    pub fc1: Linear,
    pub fc2: Linear,
    reduction: usize,
}

/// Bottleneck width `ceil(channels / r)`, never below one.
pub fn bottleneck_width(channels: usize, reduction: usize) -> usize {
    channels.div_ceil(reduction.max(1)).max(1)
}

impl DabnHead {
    pub fn new<R: Rng + ?Sized>(
        channels: usize,
        domains: usize,
        reduction: usize,
        rng: &mut R,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        let hidden = bottleneck_width(channels, reduction);
        Ok(Self {
            fc1: Linear::new(channels, hidden, rng, dtype, device)?,
            fc2: Linear::new(hidden, domains, rng, dtype, device)?,
            reduction,
        })
    }

    pub fn channels(&self) -> usize {
        self.fc1.in_dim()
    }

    pub fn domains(&self) -> usize {
        self.fc2.out_dim()
    }

    pub fn reduction(&self) -> usize {
        self.reduction
    }

    /// Mixture weights `[B, K]`; every row lies on the simplex.
    pub fn weights(&self, x: &Tensor, grad: Grad) -> Result<Tensor> {
        let (_, c, _, _) = x.dims4()?;
        if c != self.channels() {
            return Err(Error::ChannelMismatch {
                expected: self.channels(),
                got: c,
            });
        }
        let pooled = x.mean((2, 3))?;
        let hidden = self.fc1.forward(&pooled, grad)?.relu()?;
        softmax_last(&self.fc2.forward(&hidden, grad)?)
    }

    /// Adaptive normalization of `x` against `bank`. The bank's parameters
    /// are always detached here; only `W₁`/`W₂` follow `grad`.
    pub fn forward(&self, x: &Tensor, bank: &DsbnBank, grad: Grad) -> Result<Tensor> {
        if bank.domains() != self.domains() {
            return Err(Error::Shape(format!(
                "head predicts {} domains but the bank holds {}",
                self.domains(),
                bank.domains()
            )));
        }
        let alpha = self.weights(x, grad)?;
        mix_experts(x, &alpha, bank, Grad::Stop)
    }
}

impl StateDict for DabnHead {
    fn collect_state(&self, prefix: &str, out: &mut Vec<NamedTensor>) {
        push_param(out, format!("{prefix}.fc1.weight"), &self.fc1.weight);
        push_param(out, format!("{prefix}.fc1.bias"), &self.fc1.bias);
        push_param(out, format!("{prefix}.fc2.weight"), &self.fc2.weight);
        push_param(out, format!("{prefix}.fc2.bias"), &self.fc2.bias);
    }
}

/// Normalization used by the domain-invariant stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormMode {
    /// Learned mixture of the domain experts.
    Adaptive,
    /// Uniform mixture of the domain experts.
    Average,
    /// A single ordinary batch norm trained on hybrid batches.
    Plain,
}

#[derive(Debug)]
pub enum InvariantNorm {
    Adaptive(DabnHead),
    Average,
    Plain(DsbnBank),
}

impl InvariantNorm {
    pub fn new<R: Rng + ?Sized>(
        mode: NormMode,
        channels: usize,
        domains: usize,
        reduction: usize,
        rng: &mut R,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        Ok(match mode {
            NormMode::Adaptive => InvariantNorm::Adaptive(DabnHead::new(
                channels, domains, reduction, rng, dtype, device,
            )?),
            NormMode::Average => InvariantNorm::Average,
            NormMode::Plain => InvariantNorm::Plain(DsbnBank::new(1, channels, dtype, device)?),
        })
    }

    pub fn mode(&self) -> NormMode {
        match self {
            InvariantNorm::Adaptive(_) => NormMode::Adaptive,
            InvariantNorm::Average => NormMode::Average,
            InvariantNorm::Plain(_) => NormMode::Plain,
        }
    }

    pub fn forward(&self, x: &Tensor, bank: &DsbnBank, mode: BnMode, grad: Grad) -> Result<Tensor> {
        match self {
            InvariantNorm::Adaptive(head) => head.forward(x, bank, grad),
            InvariantNorm::Average => {
                let b = x.dim(0)?;
                let k = bank.domains();
                let alpha = Tensor::full(1.0 / k as f64, (b, k), x.device())?.to_dtype(x.dtype())?;
                mix_experts(x, &alpha, bank, Grad::Stop)
            }
            InvariantNorm::Plain(bn) => bn.forward(x, 0, mode, grad),
        }
    }
}

impl StateDict for InvariantNorm {
    fn collect_state(&self, prefix: &str, out: &mut Vec<NamedTensor>) {
        match self {
            InvariantNorm::Adaptive(head) => head.collect_state(prefix, out),
            InvariantNorm::Average => {}
            InvariantNorm::Plain(bn) => bn.collect_state(prefix, out),
        }
    }
}
