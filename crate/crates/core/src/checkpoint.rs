//! Single-file, versioned training checkpoints.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header, then every tensor as little-endian `f64` in header order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::model::TalModel;
use crate::nn::to_f64_vec;
use crate::state::{StateDict, TensorKind};
use crate::training::TrainGraphs;
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"TALCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntryKind {
    Param,
    Buffer,
    /// Optimizer velocity of the parameter with the same name.
    Momentum,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub kind: EntryKind,
    pub shape: Vec<usize>,
}

impl TensorEntry {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub domains: usize,
    /// Completed epochs.
    pub epoch: usize,
    pub global_step: usize,
    pub rng: ChaCha8Rng,
    pub graphs: Option<TrainGraphs>,
    pub tensors: Vec<TensorEntry>,
}

impl CheckpointHeader {
    pub fn new(
        config: &ExperimentConfig,
        domains: usize,
        epoch: usize,
        global_step: usize,
        rng: ChaCha8Rng,
        graphs: Option<TrainGraphs>,
    ) -> Result<Self> {
        Ok(Self {
            config_hash: config.hash()?,
            config: config.clone(),
            domains,
            epoch,
            global_step,
            rng,
            graphs,
            tensors: Vec::new(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    /// One value vector per header entry.
    pub values: Vec<Vec<f64>>,
}

impl Checkpoint {
    /// Snapshot of the model state and optimizer velocity.
    pub fn capture(
        mut header: CheckpointHeader,
        model: &TalModel,
        momentum: &BTreeMap<String, Tensor>,
    ) -> Result<Self> {
        header.tensors.clear();
        let mut values = Vec::new();
        for t in model.state("") {
            header.tensors.push(TensorEntry {
                name: t.name.clone(),
                kind: match t.kind {
                    TensorKind::Param => EntryKind::Param,
                    TensorKind::Buffer => EntryKind::Buffer,
                },
                shape: t.var.dims().to_vec(),
            });
            values.push(to_f64_vec(t.var.as_tensor())?);
        }
        for (name, v) in momentum {
            header.tensors.push(TensorEntry {
                name: name.clone(),
                kind: EntryKind::Momentum,
                shape: v.dims().to_vec(),
            });
            values.push(to_f64_vec(v)?);
        }
        Ok(Self { header, values })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let payload: usize = self.values.iter().map(Vec::len).sum();
        let mut out = Vec::with_capacity(20 + header.len() + 8 * payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for v in self.values.iter().flatten() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.into());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "checkpoint format {version} is not supported (expected {FORMAT_VERSION})"
            )));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let header_end = 20usize.checked_add(len).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[20..header_end])?;
        if header.config.hash()? != header.config_hash {
            return Err(bad("configuration hash does not match the stored configuration"));
        }
        let mut values = Vec::with_capacity(header.tensors.len());
        let mut pos = header_end;
        for e in &header.tensors {
            let end = pos + 8 * e.numel();
            if end > bytes.len() {
                return Err(Error::Checkpoint(format!("payload truncated in {}", e.name)));
            }
            values.push(
                bytes[pos..end]
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            );
            pos = end;
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes after payload"));
        }
        Ok(Self { header, values })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    fn entries(&self, kind: EntryKind) -> impl Iterator<Item = (&TensorEntry, &Vec<f64>)> {
        self.header
            .tensors
            .iter()
            .zip(&self.values)
            .filter(move |(e, _)| e.kind == kind)
    }

    /// Overwrites every model tensor; names and shapes must match exactly.
    pub fn load_model_state(&self, model: &TalModel) -> Result<()> {
        let mut stored: BTreeMap<&str, (&TensorEntry, &Vec<f64>)> = self
            .entries(EntryKind::Param)
            .chain(self.entries(EntryKind::Buffer))
            .map(|(e, v)| (e.name.as_str(), (e, v)))
            .collect();
        for t in model.state("") {
            let (e, v) = stored
                .remove(t.name.as_str())
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {}", t.name)))?;
            if e.shape != t.var.dims() {
                return Err(Error::Checkpoint(format!(
                    "{}: stored shape {:?}, model expects {:?}",
                    t.name,
                    e.shape,
                    t.var.dims()
                )));
            }
            let value = Tensor::from_vec(v.clone(), e.shape.as_slice(), t.var.device())?.to_dtype(t.var.dtype())?;
            t.var.set(&value)?;
        }
        if let Some(name) = stored.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected tensor {name}")));
        }
        Ok(())
    }

    pub fn momentum(&self, device: &Device, dtype: DType) -> Result<BTreeMap<String, Tensor>> {
        self.entries(EntryKind::Momentum)
            .map(|(e, v)| {
                let t = Tensor::from_vec(v.clone(), e.shape.as_slice(), device)?.to_dtype(dtype)?;
                Ok((e.name.clone(), t))
            })
            .collect()
    }

    /// Rebuilds the model stored in the checkpoint.
    pub fn model(&self) -> Result<TalModel> {
        let h = &self.header;
        let model = TalModel::new(&h.config.model_config(), h.domains, h.config.seed, DType::F32, &Device::Cpu)?;
        self.load_model_state(&model)?;
        Ok(model)
    }
}
