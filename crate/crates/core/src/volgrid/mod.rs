//! Volumetric data types shared by every other module.
//!
//! All grids are stored x-fastest: the linear index of voxel `(x, y, z)` is
//! `x + nx * (y + ny * z)`.

mod manifest;
pub mod nifti;

pub use manifest::{load_case, CaseDescriptor, Manifest};

use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("volume dims must be positive, got {0:?}")]
    ZeroDim([usize; 3]),
    #[error("voxel spacing must be strictly positive and finite, got {0:?}")]
    BadSpacing([f32; 3]),
    #[error("expected {expected} voxel values, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("label mask value {value} at index {index} is not 0 or 1")]
    NonBinaryLabel { index: usize, value: f64 },
    #[error("volume has no nonzero voxels")]
    EmptyForeground,
    #[error("case {case_id}: channel {channel} has dims {found:?}, expected {expected:?}")]
    ChannelDimsMismatch { case_id: String, channel: SequenceId, expected: [usize; 3], found: [usize; 3] },
    #[error("case {case_id}: mask dims {found:?} differ from channel dims {expected:?}")]
    MaskDimsMismatch { case_id: String, expected: [usize; 3], found: [usize; 3] },
    #[error("case {case_id}: missing channel {channel}")]
    MissingChannel { case_id: String, channel: SequenceId },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("duplicate case id {0:?} in manifest")]
    DuplicateCaseId(String),
    #[error("{path}: {source}")]
    Nifti {
        path: PathBuf,
        #[source]
        source: nifti::NiftiError,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Voxel count of a grid, or `None` on overflow.
pub fn voxel_count(dims: [usize; 3]) -> Option<usize> {
    dims[0].checked_mul(dims[1])?.checked_mul(dims[2])
}

#[inline]
pub fn linear_index(dims: [usize; 3], x: usize, y: usize, z: usize) -> usize {
    x + dims[0] * (y + dims[1] * z)
}

#[inline]
pub fn coords(dims: [usize; 3], index: usize) -> [usize; 3] {
    let x = index % dims[0];
    let yz = index / dims[0];
    [x, yz % dims[1], yz / dims[1]]
}

fn check_geometry(dims: [usize; 3], spacing: [f32; 3], len: usize) -> Result<(), VolumeError> {
    if dims.contains(&0) {
        return Err(VolumeError::ZeroDim(dims));
    }
    if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(VolumeError::BadSpacing(spacing));
    }
    let expected = voxel_count(dims).ok_or(VolumeError::ZeroDim(dims))?;
    if expected != len {
        return Err(VolumeError::LengthMismatch { expected, actual: len });
    }
    Ok(())
}

/// Dense scalar grid with voxel spacing in millimetres.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3 {
    dims: [usize; 3],
    spacing: [f32; 3],
    values: Vec<f32>,
}

impl Volume3 {
    pub fn new(dims: [usize; 3], spacing: [f32; 3], values: Vec<f32>) -> Result<Self, VolumeError> {
        check_geometry(dims, spacing, values.len())?;
        Ok(Self { dims, spacing, values })
    }

    /// Unit-spacing volume.
    pub fn from_values(dims: [usize; 3], values: Vec<f32>) -> Result<Self, VolumeError> {
        Self::new(dims, [1.0; 3], values)
    }

    pub fn zeros(dims: [usize; 3]) -> Result<Self, VolumeError> {
        let n = voxel_count(dims).ok_or(VolumeError::ZeroDim(dims))?;
        Self::from_values(dims, vec![0.0; n])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.values[linear_index(self.dims, x, y, z)]
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }
}

/// Binary cavity annotation; 1 marks the resection cavity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    dims: [usize; 3],
    values: Vec<u8>,
}

impl LabelMask {
    pub fn new(dims: [usize; 3], values: Vec<u8>) -> Result<Self, VolumeError> {
        check_geometry(dims, [1.0; 3], values.len())?;
        if let Some((index, &v)) = values.iter().enumerate().find(|(_, &v)| v > 1) {
            return Err(VolumeError::NonBinaryLabel { index, value: f64::from(v) });
        }
        Ok(Self { dims, values })
    }

    pub fn empty(dims: [usize; 3]) -> Result<Self, VolumeError> {
        let n = voxel_count(dims).ok_or(VolumeError::ZeroDim(dims))?;
        Self::new(dims, vec![0; n])
    }

    /// Builds a mask from a volume whose voxels are all exactly 0 or 1.
    pub fn from_volume(volume: &Volume3) -> Result<Self, VolumeError> {
        let mut values = Vec::with_capacity(volume.len());
        for (index, &v) in volume.values().iter().enumerate() {
            if v == 0.0 {
                values.push(0);
            } else if v == 1.0 {
                values.push(1);
            } else {
                return Err(VolumeError::NonBinaryLabel { index, value: f64::from(v) });
            }
        }
        Self::new(volume.dims(), values)
    }

    pub fn to_volume(&self) -> Volume3 {
        Volume3 { dims: self.dims, spacing: [1.0; 3], values: self.values.iter().map(|&v| f32::from(v)).collect() }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.values[linear_index(self.dims, x, y, z)] != 0
    }

    /// Number of foreground voxels.
    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&v| v != 0).count()
    }
}

/// MRI pulse sequence. Declaration order is the canonical channel order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SequenceId {
    T1,
    T1C,
    T2,
    FLAIR,
}

impl SequenceId {
    pub const ALL: [SequenceId; 4] = [SequenceId::T1, SequenceId::T1C, SequenceId::T2, SequenceId::FLAIR];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn key(self) -> &'static str {
        match self {
            SequenceId::T1 => "t1",
            SequenceId::T1C => "t1c",
            SequenceId::T2 => "t2",
            SequenceId::FLAIR => "flair",
        }
    }
}

impl fmt::Display for SequenceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SequenceId::T1 => "T1",
            SequenceId::T1C => "T1C",
            SequenceId::T2 => "T2",
            SequenceId::FLAIR => "FLAIR",
        })
    }
}

/// One acquisition: all four co-registered channels plus an optional mask.
#[derive(Debug, Clone)]
pub struct Case {
    case_id: String,
    patient_id: String,
    timepoint: u32,
    channels: [Volume3; 4],
    mask: Option<LabelMask>,
}

impl Case {
    /// `channels` are given in canonical [`SequenceId::ALL`] order.
    pub fn new(
        case_id: impl Into<String>,
        patient_id: impl Into<String>,
        timepoint: u32,
        channels: [Volume3; 4],
        mask: Option<LabelMask>,
    ) -> Result<Self, VolumeError> {
        let case_id = case_id.into();
        let dims = channels[0].dims();
        let spacing = channels[0].spacing();
        for (seq, vol) in SequenceId::ALL.iter().zip(&channels) {
            if vol.dims() != dims || vol.spacing() != spacing {
                return Err(VolumeError::ChannelDimsMismatch {
                    case_id,
                    channel: *seq,
                    expected: dims,
                    found: vol.dims(),
                });
            }
        }
        if let Some(m) = &mask {
            if m.dims() != dims {
                return Err(VolumeError::MaskDimsMismatch { case_id, expected: dims, found: m.dims() });
            }
        }
        Ok(Self { case_id, patient_id: patient_id.into(), timepoint, channels, mask })
    }

    /// Copy with every channel passed through [`znormalize`].
    pub fn normalized(&self) -> Result<Case, VolumeError> {
        let mut channels = self.channels.clone();
        for c in &mut channels {
            *c = znormalize(c)?;
        }
        Ok(Case { channels, ..self.clone() })
    }

    pub fn case_id(&self) -> &str {
        &self.case_id
    }

    pub fn patient_id(&self) -> &str {
        &self.patient_id
    }

    pub fn timepoint(&self) -> u32 {
        self.timepoint
    }

    pub fn dims(&self) -> [usize; 3] {
        self.channels[0].dims()
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.channels[0].spacing()
    }

    pub fn channel(&self, seq: SequenceId) -> &Volume3 {
        &self.channels[seq.index()]
    }

    pub fn channels(&self) -> &[Volume3; 4] {
        &self.channels
    }

    pub fn mask(&self) -> Option<&LabelMask> {
        self.mask.as_ref()
    }
}

const NORMALIZE_EPS: f64 = 1e-8;

/// Z-scores the nonzero voxels; exact zeros (outside the brain) stay zero.
pub fn znormalize(volume: &Volume3) -> Result<Volume3, VolumeError> {
    let (mut n, mut sum) = (0usize, 0.0f64);
    for &v in volume.values() {
        if v != 0.0 {
            n += 1;
            sum += f64::from(v);
        }
    }
    if n == 0 {
        return Err(VolumeError::EmptyForeground);
    }
    let mean = sum / n as f64;
    let var =
        volume.values().iter().filter(|&&v| v != 0.0).map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / n as f64;
    let scale = 1.0 / (var + NORMALIZE_EPS).sqrt();
    let values =
        volume.values().iter().map(|&v| if v == 0.0 { 0.0 } else { ((f64::from(v) - mean) * scale) as f32 }).collect();
    Ok(Volume3 { dims: volume.dims, spacing: volume.spacing, values })
}
