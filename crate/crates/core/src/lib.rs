//! Volumetric resection-cavity segmentation harness.
//!
//! The crate covers the whole experiment: data types and NIfTI I/O
//! ([`volgrid`]), a synthetic phantom generator ([`phantom`]), a small
//! reverse-mode autodiff engine ([`autodiff`]), the 3D U-Net and its losses
//! ([`model`]), patch sampling, training and sliding-window inference
//! ([`pipeline`]), and overlap metrics, folds and paired statistics
//! ([`evalstat`]).

pub mod autodiff;
pub mod evalstat;
pub mod model;
pub mod phantom;
pub mod pipeline;
pub mod seed;
pub mod volgrid;
