//! Patch sampling, training, checkpoints and sliding-window inference.

mod adam;
mod checkpoint;
mod components;
mod infer;
mod sampler;
mod train;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{Checkpoint, CHECKPOINT_BLOB, CHECKPOINT_META};
pub use components::{label_components, largest_component, Connectivity};
pub use infer::{predict, predict_with, segment, InferenceConfig};
pub use sampler::{case_tensor, sample_patches, Patch, SamplerConfig};
pub use train::{mean_jaccard, train, TrainConfig};

use std::fmt;
use std::io;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::AutodiffError;
use crate::model::ModelError;
use crate::volgrid::SequenceId;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("case {0} has an empty mask")]
    NoForeground(String),
    #[error("case {0} has no mask")]
    MissingMask(String),
    #[error("patch {patch:?} does not fit volume {dims:?}")]
    PatchTooLarge { patch: [usize; 3], dims: [usize; 3] },
    #[error("loss became non-finite at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Input channels fed to the network, kept in canonical sequence order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<SequenceId>", into = "Vec<SequenceId>")]
pub struct ChannelSelection(Vec<SequenceId>);

impl ChannelSelection {
    pub fn new(mut seqs: Vec<SequenceId>) -> Result<Self, PipelineError> {
        seqs.sort_by_key(|s| s.index());
        seqs.dedup();
        if seqs.is_empty() {
            return Err(PipelineError::InvalidConfig("channel selection is empty".into()));
        }
        Ok(Self(seqs))
    }

    pub fn single(seq: SequenceId) -> Self {
        Self(vec![seq])
    }

    pub fn all() -> Self {
        Self(SequenceId::ALL.to_vec())
    }

    pub fn sequences(&self) -> &[SequenceId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl TryFrom<Vec<SequenceId>> for ChannelSelection {
    type Error = String;

    fn try_from(v: Vec<SequenceId>) -> Result<Self, Self::Error> {
        Self::new(v).map_err(|e| e.to_string())
    }
}

impl From<ChannelSelection> for Vec<SequenceId> {
    fn from(c: ChannelSelection) -> Self {
        c.0
    }
}

impl fmt::Display for ChannelSelection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<String> = self.0.iter().map(ToString::to_string).collect();
        write!(f, "{}", names.join("+"))
    }
}
