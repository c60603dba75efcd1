use std::collections::HashSet;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::nifti::{self, NiftiError};
use super::{znormalize, Case, LabelMask, SequenceId, Volume3, VolumeError};

/// One manifest row. Paths are relative to the manifest's directory unless
/// absolute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseDescriptor {
    pub case_id: String,
    pub patient_id: String,
    pub timepoint: u32,
    pub t1: String,
    pub t1c: String,
    pub t2: String,
    pub flair: String,
    #[serde(default)]
    pub mask: Option<String>,
    #[serde(default)]
    pub normalize: bool,
}

impl CaseDescriptor {
    pub fn channel_path(&self, seq: SequenceId) -> &str {
        match seq {
            SequenceId::T1 => &self.t1,
            SequenceId::T1C => &self.t1c,
            SequenceId::T2 => &self.t2,
            SequenceId::FLAIR => &self.flair,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub base_dir: PathBuf,
    pub cases: Vec<CaseDescriptor>,
}

impl Manifest {
    /// Parses the JSON array form and checks case id uniqueness.
    pub fn from_json(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self, VolumeError> {
        let cases: Vec<CaseDescriptor> =
            serde_json::from_str(text).map_err(|e| VolumeError::Manifest(e.to_string()))?;
        let mut seen = HashSet::new();
        for c in &cases {
            if !seen.insert(c.case_id.as_str()) {
                return Err(VolumeError::DuplicateCaseId(c.case_id.clone()));
            }
        }
        Ok(Self { base_dir: base_dir.into(), cases })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, VolumeError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| VolumeError::Io { path: path.to_owned(), source })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_json(&text, base)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.cases).expect("manifest serialization")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), VolumeError> {
        let path = path.as_ref();
        fs::write(path, self.to_json() + "\n").map_err(|source| VolumeError::Io { path: path.to_owned(), source })
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        let p = Path::new(rel);
        if p.is_absolute() {
            p.to_owned()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn load_case(&self, entry: &CaseDescriptor) -> Result<Case, VolumeError> {
        load_case(entry, &self.base_dir)
    }

    pub fn load_all(&self) -> Result<Vec<Case>, VolumeError> {
        self.cases.iter().map(|c| self.load_case(c)).collect()
    }
}

fn nifti_err(path: &Path, err: NiftiError) -> VolumeError {
    match err {
        NiftiError::IoFailure(source) => VolumeError::Io { path: path.to_owned(), source },
        source => VolumeError::Nifti { path: path.to_owned(), source },
    }
}

/// Loads all four channels (and the mask, when listed) of one descriptor.
pub fn load_case(entry: &CaseDescriptor, base_dir: &Path) -> Result<Case, VolumeError> {
    let resolve = |rel: &str| {
        let p = Path::new(rel);
        if p.is_absolute() {
            p.to_owned()
        } else {
            base_dir.join(p)
        }
    };
    let mut channels: Vec<Volume3> = Vec::with_capacity(4);
    for seq in SequenceId::ALL {
        let rel = entry.channel_path(seq);
        let missing = || VolumeError::MissingChannel { case_id: entry.case_id.clone(), channel: seq };
        if rel.is_empty() {
            return Err(missing());
        }
        let path = resolve(rel);
        let vol = match nifti::load_nifti(&path) {
            Ok(v) => v,
            Err(NiftiError::IoFailure(e)) if e.kind() == io::ErrorKind::NotFound => return Err(missing()),
            Err(e) => return Err(nifti_err(&path, e)),
        };
        if let Some(first) = channels.first() {
            if first.dims() != vol.dims() || first.spacing() != vol.spacing() {
                return Err(VolumeError::ChannelDimsMismatch {
                    case_id: entry.case_id.clone(),
                    channel: seq,
                    expected: first.dims(),
                    found: vol.dims(),
                });
            }
        }
        let vol = if entry.normalize { znormalize(&vol)? } else { vol };
        channels.push(vol);
    }
    let mask = match &entry.mask {
        Some(rel) if !rel.is_empty() => {
            let path = resolve(rel);
            let vol = nifti::load_nifti(&path).map_err(|e| nifti_err(&path, e))?;
            Some(LabelMask::from_volume(&vol)?)
        }
        _ => None,
    };
    let channels: [Volume3; 4] = channels.try_into().expect("four channels");
    Case::new(entry.case_id.clone(), entry.patient_id.clone(), entry.timepoint, channels, mask)
}
