//! The 3D U-Net, its receptive-field arithmetic, and the segmentation losses.

mod loss;
mod receptive;
mod unet;

pub use loss::{soft_jaccard, tversky_loss, tversky_loss_batch, LossConfig, JACCARD_EPS};
pub use receptive::{compute_receptive_field, receptive_field, Layer};
pub use unet::{build_unet, UNet, UNetConfig};

use thiserror::Error;

use crate::autodiff::AutodiffError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("input spatial dims {dims:?} are not divisible by {divisor}")]
    IndivisiblePatch { dims: Vec<usize>, divisor: usize },
    #[error("missing parameter {0}")]
    MissingParameter(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}
