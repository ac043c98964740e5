//! Single-file checkpoints: an 8-byte magic, a little-endian `u64` manifest
//! length, the JSON manifest, then every tensor as little-endian `f32` at
//! the offset recorded in the manifest.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::optim::{Adam, LrScheduler};
use super::{EpochMetrics, TrainConfig};
use crate::data::atomic_write;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::Parameterized;

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"VLPCKPT1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub adam: Adam,
    pub scheduler: LrScheduler,
    pub config: TrainConfig,
    /// Epochs completed so far.
    pub epoch: usize,
    pub history: Vec<EpochMetrics>,
    pub best_validation: Option<f64>,
    pub epochs_without_improvement: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    /// Byte offset from the start of the tensor section.
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    format_version: u32,
    config_hash: String,
    config: TrainConfig,
    epoch: usize,
    adam_step: u64,
    scheduler: LrScheduler,
    history: Vec<EpochMetrics>,
    best_validation: Option<f64>,
    epochs_without_improvement: usize,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    fn optimizer_tensors(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out = Vec::new();
        for (n, t) in &self.adam.first {
            out.push((format!("adam.first.{n}"), t));
        }
        for (n, t) in &self.adam.second {
            out.push((format!("adam.second.{n}"), t));
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut named: Vec<(String, Array2<f64>)> = Vec::new();
        self.model.visit("", &mut |n, t| named.push((format!("param.{n}"), t.clone())));
        for (n, t) in self.optimizer_tensors() {
            named.push((n, t.clone()));
        }
        let mut entries = Vec::with_capacity(named.len());
        let mut data = Vec::new();
        for (name, t) in &named {
            entries.push(TensorEntry { name: name.clone(), shape: [t.nrows(), t.ncols()], offset: data.len() });
            for v in t.iter() {
                data.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        let manifest = CheckpointManifest {
            format_version: 1,
            config_hash: self.config.hash(),
            config: self.config.clone(),
            epoch: self.epoch,
            adam_step: self.adam.step,
            scheduler: self.scheduler.clone(),
            history: self.history.clone(),
            best_validation: self.best_validation,
            epochs_without_improvement: self.epochs_without_improvement,
            tensors: entries,
        };
        let json = serde_json::to_vec(&manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + json.len() + data.len());
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&data);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let json = bytes.get(16..16 + len).ok_or_else(|| Error::Checkpoint("truncated manifest".into()))?;
        let m: CheckpointManifest = serde_json::from_slice(json).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if m.format_version != 1 {
            return Err(Error::Checkpoint(format!("unsupported format_version {}", m.format_version)));
        }
        if m.config.hash() != m.config_hash {
            return Err(Error::Checkpoint("config hash does not match stored config".into()));
        }
        let data = &bytes[16 + len..];
        let tensor = |name: &str| -> Result<Array2<f64>> {
            let e = m
                .tensors
                .iter()
                .find(|e| e.name == name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            let count = e.shape[0] * e.shape[1];
            let raw = data
                .get(e.offset..e.offset + 4 * count)
                .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` runs past end of file")))?;
            let vals = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect();
            Array2::from_shape_vec((e.shape[0], e.shape[1]), vals).map_err(|e| Error::Checkpoint(e.to_string()))
        };

        let mut model = Model::init(m.config.model.clone(), 0)?;
        let mut failure = None;
        model.visit_mut("", &mut |n, t| match tensor(&format!("param.{n}")) {
            Ok(v) if v.dim() == t.dim() => *t = v,
            Ok(_) => {
                failure.get_or_insert(Error::Checkpoint(format!("tensor `{n}` has the wrong shape")));
            }
            Err(e) => {
                failure.get_or_insert(e);
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        let mut adam = Adam::new(&model);
        adam.step = m.adam_step;
        for (n, t) in adam.first.iter_mut() {
            *t = tensor(&format!("adam.first.{n}"))?;
        }
        for (n, t) in adam.second.iter_mut() {
            *t = tensor(&format!("adam.second.{n}"))?;
        }
        Ok(Self {
            model,
            adam,
            scheduler: m.scheduler,
            config: m.config,
            epoch: m.epoch,
            history: m.history,
            best_validation: m.best_validation,
            epochs_without_improvement: m.epochs_without_improvement,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| e.context(path.display().to_string()))
    }
}
