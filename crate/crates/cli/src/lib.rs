//! Command implementations behind the `cavseg` binary.
//!
//! Every command returns a [`CliError`] whose [`CliError::exit_code`] is the
//! process status: 2 for configuration problems, 3 for I/O, 4 for training
//! failures.

pub mod commands;
pub mod experiment;

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use thiserror::Error;

use cavseg::evalstat::EvalError;
use cavseg::phantom::PhantomError;
use cavseg::pipeline::PipelineError;
use cavseg::volgrid::VolumeError;

pub use commands::{
    cmd_evaluate, cmd_phantom_gen, cmd_predict, cmd_report, cmd_train, EvaluateConfig, PhantomGenConfig, PredictConfig,
    TrainCommandConfig,
};
pub use experiment::{cmd_experiment, run_experiment, ExperimentArgs, ExperimentConfig, ExperimentOutcome};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("training failed: {0}")]
    Training(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Training(_) => 4,
        }
    }
}

impl From<PhantomError> for CliError {
    fn from(e: PhantomError) -> Self {
        match e {
            PhantomError::InvalidConfig(_) => CliError::Config(e.to_string()),
            PhantomError::Io { .. } => CliError::Io(e.to_string()),
            PhantomError::Volume(v) => v.into(),
        }
    }
}

impl From<VolumeError> for CliError {
    fn from(e: VolumeError) -> Self {
        match e {
            VolumeError::Io { .. } | VolumeError::Nifti { .. } | VolumeError::MissingChannel { .. } => {
                CliError::Io(e.to_string())
            }
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::Config(e.to_string())
    }
}

/// Pipeline errors raised while training map to exit code 4 unless they are
/// plainly configuration or I/O problems.
pub(crate) fn training_error(e: PipelineError) -> CliError {
    match e {
        PipelineError::Io { .. } => CliError::Io(e.to_string()),
        PipelineError::InvalidConfig(_)
        | PipelineError::PatchTooLarge { .. }
        | PipelineError::MissingMask(_)
        | PipelineError::NoForeground(_) => CliError::Config(e.to_string()),
        _ => CliError::Training(e.to_string()),
    }
}

pub(crate) fn pipeline_error(e: PipelineError) -> CliError {
    match e {
        PipelineError::Io { .. } => CliError::Io(e.to_string()),
        _ => CliError::Config(e.to_string()),
    }
}

/// Reads and parses a JSON config file. A missing or unreadable file is a
/// configuration error, not an I/O error.
pub fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// Resolves `rel` against the directory holding the config file.
pub(crate) fn relative_to(config_path: Option<&Path>, rel: &Path) -> PathBuf {
    if rel.is_absolute() {
        return rel.to_owned();
    }
    match config_path.and_then(Path::parent) {
        Some(dir) => dir.join(rel),
        None => rel.to_owned(),
    }
}

pub(crate) fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, contents).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}
