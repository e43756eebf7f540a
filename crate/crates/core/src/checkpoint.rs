//! Checkpoints: magic bytes, a length-prefixed JSON header, then every
//! parameter and buffer as little-endian `f32` in declaration order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::model::{ArchConfig, ModelKind, Network};
use crate::training::{EpochMetrics, TrainConfig};

pub const CHECKPOINT_SCHEMA: u32 = 1;
const MAGIC: &[u8; 8] = b"TWUQCKPT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub schema_version: u32,
    pub kind: ModelKind,
    pub arch: ArchConfig,
    pub train_config: TrainConfig,
    pub class_map: Vec<String>,
    pub train_twins: Vec<u16>,
    /// Dataset-average input variance of the training set (ADF models).
    pub input_variance_mean: f64,
    pub history: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub best_val_accuracy: f64,
    pub param_count: usize,
    pub params: Vec<TensorEntry>,
    pub buffers: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub network: Network,
}

fn entries(names: Vec<String>, tensors: &[&crate::tensor::Tensor]) -> Vec<TensorEntry> {
    names
        .into_iter()
        .zip(tensors)
        .map(|(name, t)| TensorEntry {
            name,
            shape: t.shape().to_vec(),
        })
        .collect()
}

impl Checkpoint {
    /// Fills in the tensor tables of `header` from `network`.
    pub fn new(mut header: CheckpointHeader, network: Network) -> Self {
        let (pn, bn) = network.tensor_names();
        header.schema_version = CHECKPOINT_SCHEMA;
        header.kind = network.kind;
        header.arch = network.config.clone();
        header.param_count = network.param_count();
        header.params = entries(pn, &network.params());
        header.buffers = entries(bn, &network.buffers());
        Self { header, network }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(MAGIC.len() + 4 + header.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.network.params().into_iter().chain(self.network.buffers()) {
            for v in t.data() {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fail = |m: String| Error::Format(m);
        if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(fail("not a checkpoint (bad magic)".into()));
        }
        let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = bytes.get(12..12 + len).ok_or_else(|| fail("truncated checkpoint header".into()))?;
        let header: CheckpointHeader = serde_json::from_slice(body)?;
        if header.schema_version != CHECKPOINT_SCHEMA {
            return Err(fail(format!("checkpoint schema {} is not supported", header.schema_version)));
        }
        let mut network = Network::new(header.arch.clone(), header.kind, 0)?;
        if network.param_count() != header.param_count {
            return Err(fail(format!(
                "header declares {} parameters but the architecture has {}",
                header.param_count,
                network.param_count()
            )));
        }
        let (pn, bn) = network.tensor_names();
        if entries(pn, &network.params()) != header.params || entries(bn, &network.buffers()) != header.buffers {
            return Err(fail("tensor table disagrees with the architecture".into()));
        }
        let blob = &bytes[12 + len..];
        let total: usize = network.params().iter().chain(network.buffers().iter()).map(|t| t.len()).sum();
        if blob.len() != 4 * total {
            return Err(fail(format!("weight blob has {} bytes, expected {}", blob.len(), 4 * total)));
        }
        let mut values = blob.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64);
        let mut tensors = network.params_mut();
        for t in tensors.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = values.next().unwrap());
        }
        for t in network.buffers_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = values.next().unwrap());
        }
        if network
            .buffers()
            .iter()
            .enumerate()
            .any(|(i, b)| i % 2 == 1 && b.data().iter().any(|v| !(*v > 0.0)))
        {
            return Err(fail("non-positive running variance".into()));
        }
        Ok(Self { header, network })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(io_err(path))?)
    }
}
