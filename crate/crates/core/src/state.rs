//! Named access to every learnable parameter and running buffer.
//!
//! Buffers (running statistics) are stored as [`Var`]s as well so that
//! checkpoint loading and hashing walk one list; they are only ever read
//! detached and updated through [`Var::set`].

use candle_core::Var;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::nn::to_f64_vec;
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TensorKind {
    Param,
    Buffer,
}

#[derive(Debug, Clone)]
pub struct NamedTensor {
    pub name: String,
    pub var: Var,
    pub kind: TensorKind,
}

pub trait StateDict {
    fn collect_state(&self, prefix: &str, out: &mut Vec<NamedTensor>);

    fn state(&self, prefix: &str) -> Vec<NamedTensor> {
        let mut out = Vec::new();
        self.collect_state(prefix, &mut out);
        out
    }
}

pub(crate) fn push_param(out: &mut Vec<NamedTensor>, name: String, var: &Var) {
    out.push(NamedTensor {
        name,
        var: var.clone(),
        kind: TensorKind::Param,
    });
}

pub(crate) fn push_buffer(out: &mut Vec<NamedTensor>, name: String, var: &Var) {
    out.push(NamedTensor {
        name,
        var: var.clone(),
        kind: TensorKind::Buffer,
    });
}

/// SHA-256 over names, shapes and exact values of the given tensors.
pub fn hash_state(entries: &[NamedTensor]) -> Result<String> {
    let mut hasher = Sha256::new();
    for entry in entries {
        hasher.update(entry.name.as_bytes());
        for d in entry.var.dims() {
            hasher.update((*d as u64).to_le_bytes());
        }
        for v in to_f64_vec(entry.var.as_tensor())? {
            hasher.update(v.to_bits().to_le_bytes());
        }
    }
    Ok(hex(&hasher.finalize()))
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
