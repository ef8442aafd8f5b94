//! Small building blocks shared by the normalization and matching layers.

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::Result;

/// Whether a layer's parameters take part in the autograd graph.
///
/// `Stop` detaches the parameter tensors: gradients still flow through the
/// layer to its input, but never reach the parameters themselves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Grad {
    Track,
    Stop,
}

/// Batch-norm statistics source.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics and update the running estimates.
    Train,
    /// Normalize with the stored running estimates.
    Eval,
}

pub(crate) fn param(var: &Var, grad: Grad) -> Tensor {
    match grad {
        Grad::Track => var.as_tensor().clone(),
        Grad::Stop => var.as_tensor().detach(),
    }
}

pub(crate) fn uniform<R: Rng + ?Sized>(
    rng: &mut R,
    shape: &[usize],
    bound: f64,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Ok(Tensor::from_vec(data, shape, device)?.to_dtype(dtype)?)
}

pub(crate) fn normal<R: Rng + ?Sized>(
    rng: &mut R,
    shape: &[usize],
    std: f64,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("finite std");
    let data: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
    Ok(Tensor::from_vec(data, shape, device)?.to_dtype(dtype)?)
}

/// Fully connected layer `y = x Wᵀ + b` over the last axis of a 2-D input.
#[derive(Debug)]
pub struct Linear {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    /// Uniform `±1/sqrt(in_dim)` initialization for weight and bias.
    pub fn new<R: Rng + ?Sized>(
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = uniform(rng, &[out_dim, in_dim], bound, dtype, device)?;
        let bias = uniform(rng, &[out_dim], bound, dtype, device)?;
        Ok(Self {
            weight: Var::from_tensor(&weight)?,
            bias: Var::from_tensor(&bias)?,
        })
    }

    /// Every output starts as the mean of the inputs: weight `1/in_dim`,
    /// bias 0.
    pub fn averaging(in_dim: usize, out_dim: usize, dtype: DType, device: &Device) -> Result<Self> {
        let weight = Tensor::full(1.0 / in_dim as f64, (out_dim, in_dim), device)?.to_dtype(dtype)?;
        Ok(Self {
            weight: Var::from_tensor(&weight)?,
            bias: Var::zeros(out_dim, dtype, device)?,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor, grad: Grad) -> Result<Tensor> {
        let w = param(&self.weight, grad);
        let b = param(&self.bias, grad);
        Ok(x.matmul(&w.t()?)?.broadcast_add(&b)?)
    }
}

/// Softmax over the last axis, shifted by the (detached) row maximum.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let shift = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&shift)?.exp()?;
    let z = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&z)?)
}

/// Flattened copy of a tensor as `f64` values.
pub fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}
