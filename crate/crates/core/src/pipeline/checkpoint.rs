use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ChannelSelection, PipelineError, SamplerConfig, TrainConfig};
use crate::autodiff::{ParamSet, Tensor};
use crate::model::{UNet, UNetConfig};

pub const CHECKPOINT_META: &str = "ckpt.json";
pub const CHECKPOINT_BLOB: &str = "ckpt.bin";
const FORMAT: &str = "cavseg-checkpoint/1";

/// Trained network plus everything needed to reproduce it. Parameters are
/// held at f32 precision so that the on-disk form round-trips exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: UNetConfig,
    pub channels: ChannelSelection,
    pub sampler: SamplerConfig,
    pub train: TrainConfig,
    pub best_val_jaccard: f64,
    pub iteration_of_best: usize,
    params: ParamSet,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the blob.
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    format: String,
    model: UNetConfig,
    channels: ChannelSelection,
    sampler: SamplerConfig,
    train: TrainConfig,
    best_val_jaccard: f64,
    iteration_of_best: usize,
    blob_bytes: usize,
    tensors: Vec<TensorEntry>,
}

fn bad(msg: impl Into<String>) -> PipelineError {
    PipelineError::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn new(
        model: UNetConfig,
        channels: ChannelSelection,
        sampler: SamplerConfig,
        train: TrainConfig,
        params: &ParamSet,
        best_val_jaccard: f64,
        iteration_of_best: usize,
    ) -> Result<Self, PipelineError> {
        let mut rounded = ParamSet::new();
        for (name, t) in params.iter() {
            let data = t.data().iter().map(|&v| f64::from(v as f32)).collect();
            rounded.insert(name.clone(), Tensor::new(t.shape().to_vec(), data)?);
        }
        let ckpt = Self { model, channels, sampler, train, best_val_jaccard, iteration_of_best, params: rounded };
        ckpt.validate()?;
        Ok(ckpt)
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn network(&self) -> Result<UNet, PipelineError> {
        Ok(UNet::new(self.model.clone())?)
    }

    fn validate(&self) -> Result<(), PipelineError> {
        let net = UNet::new(self.model.clone()).map_err(|e| bad(e.to_string()))?;
        if self.channels.len() != self.model.in_channels {
            return Err(bad(format!(
                "{} selected channels but the model takes {}",
                self.channels.len(),
                self.model.in_channels
            )));
        }
        if !(0.0..=1.0).contains(&self.best_val_jaccard) {
            return Err(bad(format!("best_val_jaccard {} outside [0, 1]", self.best_val_jaccard)));
        }
        let expected = net.param_shapes();
        if expected.len() != self.params.len() {
            return Err(bad(format!("{} tensors present, model needs {}", self.params.len(), expected.len())));
        }
        for (name, shape) in expected {
            match self.params.get(&name) {
                None => return Err(bad(format!("missing tensor {name}"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(bad(format!("tensor {name} has shape {:?}, expected {shape:?}", t.shape())))
                }
                Some(t) if t.data().iter().any(|v| !v.is_finite()) => {
                    return Err(bad(format!("tensor {name} holds non-finite values")))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }

    /// Metadata JSON and the little-endian f32 parameter blob.
    pub fn encode(&self) -> (String, Vec<u8>) {
        let mut blob = Vec::with_capacity(self.params.count() * 4);
        let mut tensors = Vec::with_capacity(self.params.len());
        for (name, t) in self.params.iter() {
            tensors.push(TensorEntry { name: name.clone(), shape: t.shape().to_vec(), offset: blob.len() });
            for &v in t.data() {
                blob.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let meta = Meta {
            format: FORMAT.to_owned(),
            model: self.model.clone(),
            channels: self.channels.clone(),
            sampler: self.sampler.clone(),
            train: self.train.clone(),
            best_val_jaccard: self.best_val_jaccard,
            iteration_of_best: self.iteration_of_best,
            blob_bytes: blob.len(),
            tensors,
        };
        let mut json = serde_json::to_string_pretty(&meta).expect("serialisable");
        json.push('\n');
        (json, blob)
    }

    pub fn decode(json: &str, blob: &[u8]) -> Result<Self, PipelineError> {
        let meta: Meta = serde_json::from_str(json).map_err(|e| bad(e.to_string()))?;
        if meta.format != FORMAT {
            return Err(bad(format!("unknown format {:?}", meta.format)));
        }
        if meta.blob_bytes != blob.len() {
            return Err(bad(format!("blob is {} bytes, metadata says {}", blob.len(), meta.blob_bytes)));
        }
        let mut params = ParamSet::new();
        let mut cursor = 0usize;
        for entry in &meta.tensors {
            if entry.offset != cursor {
                return Err(bad(format!("tensor {} at offset {}, expected {cursor}", entry.name, entry.offset)));
            }
            let n = entry
                .shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .and_then(|n| n.checked_mul(4).map(|b| (n, b)));
            let Some((n, bytes)) = n else {
                return Err(bad(format!("tensor {} shape overflows", entry.name)));
            };
            let end = cursor.checked_add(bytes).filter(|&e| e <= blob.len());
            let Some(end) = end else {
                return Err(bad(format!("tensor {} runs past the blob", entry.name)));
            };
            let data = blob[cursor..end]
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
                .collect::<Vec<_>>();
            debug_assert_eq!(data.len(), n);
            let tensor = Tensor::new(entry.shape.clone(), data).map_err(|e| bad(e.to_string()))?;
            if params.insert(entry.name.clone(), tensor).is_some() {
                return Err(bad(format!("duplicate tensor {}", entry.name)));
            }
            cursor = end;
        }
        if cursor != blob.len() {
            return Err(bad(format!("{} trailing blob bytes", blob.len() - cursor)));
        }
        let ckpt = Self {
            model: meta.model,
            channels: meta.channels,
            sampler: meta.sampler,
            train: meta.train,
            best_val_jaccard: meta.best_val_jaccard,
            iteration_of_best: meta.iteration_of_best,
            params,
        };
        ckpt.validate()?;
        Ok(ckpt)
    }

    /// Writes `ckpt.json` and `ckpt.bin` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), PipelineError> {
        let io = |p: &Path, source| PipelineError::Io { path: p.display().to_string(), source };
        fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        let (json, blob) = self.encode();
        let blob_path = dir.join(CHECKPOINT_BLOB);
        fs::write(&blob_path, blob).map_err(|e| io(&blob_path, e))?;
        let meta_path = dir.join(CHECKPOINT_META);
        fs::write(&meta_path, json).map_err(|e| io(&meta_path, e))
    }

    pub fn load(dir: &Path) -> Result<Self, PipelineError> {
        let read = |name: &str| {
            let p = dir.join(name);
            fs::read(&p).map_err(|source| PipelineError::Io { path: p.display().to_string(), source })
        };
        let json = read(CHECKPOINT_META)?;
        let blob = read(CHECKPOINT_BLOB)?;
        let json = String::from_utf8(json).map_err(|_| bad("metadata is not UTF-8"))?;
        Self::decode(&json, &blob)
    }
}
