//! Single-step subcommands; `experiment` lives in its own module.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use cavseg::evalstat::{
    dice, jaccard, parse_metrics_csv, train_val_split, write_metrics_csv, MetricRecord, SequenceConfig,
};
use cavseg::model::UNetConfig;
use cavseg::phantom::{generate_dataset, PhantomConfig};
use cavseg::pipeline::{segment, train, Checkpoint, InferenceConfig, SamplerConfig, TrainConfig};
use cavseg::volgrid::{nifti, Case, Manifest};

use crate::experiment::write_outputs;
use crate::{pipeline_error, read_config, relative_to, training_error, write_file, CliError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomGenConfig {
    #[serde(default)]
    pub phantom: PhantomConfig,
    pub n_patients: usize,
    /// One entry per patient; every patient gets one timepoint when absent.
    #[serde(default)]
    pub timepoints_per_patient: Option<Vec<u32>>,
}

/// Writes the dataset into `out` and returns the number of cases.
pub fn cmd_phantom_gen(config: &Path, out: &Path, seed: Option<u64>) -> Result<usize, CliError> {
    let mut cfg: PhantomGenConfig = read_config(config)?;
    if let Some(s) = seed {
        cfg.phantom.seed = s;
    }
    if cfg.n_patients == 0 {
        return Err(CliError::Config("n_patients must be >= 1".into()));
    }
    let timepoints = cfg.timepoints_per_patient.clone().unwrap_or_else(|| vec![1; cfg.n_patients]);
    let manifest = generate_dataset(&cfg.phantom, cfg.n_patients, &timepoints, out)?;
    Ok(manifest.cases.len())
}

fn load_manifest(config_path: &Path, rel: &Path) -> Result<(Manifest, Vec<Case>), CliError> {
    let manifest = Manifest::load(relative_to(Some(config_path), rel))?;
    let cases = manifest.load_all()?;
    Ok((manifest, cases))
}

fn subset(cases: &[Case], ids: &[String]) -> Result<Vec<Case>, CliError> {
    ids.iter()
        .map(|id| {
            cases
                .iter()
                .find(|c| c.case_id() == id)
                .cloned()
                .ok_or_else(|| CliError::Config(format!("case {id} is not in the manifest")))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainCommandConfig {
    pub manifest: PathBuf,
    pub config: SequenceConfig,
    /// Explicit case lists; otherwise every manifest case is split 80/20.
    #[serde(default)]
    pub train_cases: Option<Vec<String>>,
    #[serde(default)]
    pub val_cases: Option<Vec<String>>,
    #[serde(default)]
    pub model: UNetConfig,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub seed: u64,
}

/// Trains one network and saves the checkpoint into `out`.
pub fn cmd_train(config: &Path, out: &Path, seed: Option<u64>) -> Result<Checkpoint, CliError> {
    let mut cfg: TrainCommandConfig = read_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let (_, cases) = load_manifest(config, &cfg.manifest)?;
    let (train_set, val_set) = match (&cfg.train_cases, &cfg.val_cases) {
        (Some(t), Some(v)) => (subset(&cases, t)?, subset(&cases, v)?),
        (None, None) => train_val_split(&cases, cfg.seed)?,
        _ => return Err(CliError::Config("give both train_cases and val_cases or neither".into())),
    };
    let model = UNetConfig { in_channels: cfg.config.channels().len(), seed: cfg.seed, ..cfg.model };
    let sampler = SamplerConfig { seed: cfg.seed, ..cfg.sampler };
    let train_cfg = TrainConfig { seed: cfg.seed, ..cfg.train };
    let ckpt =
        train(&train_set, &val_set, &cfg.config.channels(), &model, &sampler, &train_cfg).map_err(training_error)?;
    ckpt.save(out).map_err(pipeline_error)?;
    log::info!(
        "trained {} on {} cases: best val jaccard {:.4} at iteration {}",
        cfg.config,
        train_set.len(),
        ckpt.best_val_jaccard,
        ckpt.iteration_of_best
    );
    Ok(ckpt)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictConfig {
    pub checkpoint: PathBuf,
    pub manifest: PathBuf,
    /// Defaults to every manifest case.
    #[serde(default)]
    pub cases: Option<Vec<String>>,
    #[serde(default)]
    pub inference: InferenceConfig,
}

/// Writes `<case>_prob.nii` and the component-filtered `<case>_pred.nii`
/// for each case; returns the number of cases segmented.
pub fn cmd_predict(config: &Path, out: &Path) -> Result<usize, CliError> {
    let cfg: PredictConfig = read_config(config)?;
    let ckpt = Checkpoint::load(&relative_to(Some(config), &cfg.checkpoint)).map_err(pipeline_error)?;
    let (_, cases) = load_manifest(config, &cfg.manifest)?;
    let cases = match &cfg.cases {
        Some(ids) => subset(&cases, ids)?,
        None => cases,
    };
    fs::create_dir_all(out).map_err(|e| CliError::Io(format!("{}: {e}", out.display())))?;
    for case in &cases {
        let (prob, mask) = segment(&ckpt, case, &cfg.inference).map_err(pipeline_error)?;
        let io = |e: nifti::NiftiError| CliError::Io(e.to_string());
        nifti::save_nifti(&prob, out.join(format!("{}_prob.nii", case.case_id()))).map_err(io)?;
        nifti::save_mask(&mask, out.join(format!("{}_pred.nii", case.case_id()))).map_err(io)?;
        log::info!("segmented {} ({} voxels)", case.case_id(), mask.count());
    }
    Ok(cases.len())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateConfig {
    pub manifest: PathBuf,
    /// Directory holding `<case>_pred.nii` files.
    pub predictions: PathBuf,
    pub config: SequenceConfig,
    #[serde(default)]
    pub fold: usize,
}

/// Scores predicted masks against the manifest masks into `out/metrics.csv`.
pub fn cmd_evaluate(config: &Path, out: &Path) -> Result<Vec<MetricRecord>, CliError> {
    let cfg: EvaluateConfig = read_config(config)?;
    let (_, cases) = load_manifest(config, &cfg.manifest)?;
    let pred_dir = relative_to(Some(config), &cfg.predictions);
    let mut records = Vec::new();
    for case in &cases {
        let path = pred_dir.join(format!("{}_pred.nii", case.case_id()));
        if !path.exists() {
            continue;
        }
        let truth = case.mask().ok_or_else(|| CliError::Config(format!("case {} has no mask", case.case_id())))?;
        let pred = nifti::load_mask(&path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        records.push(MetricRecord {
            case_id: case.case_id().to_owned(),
            patient_id: case.patient_id().to_owned(),
            fold: cfg.fold,
            config: cfg.config,
            dice: dice(&pred, truth)?,
            jaccard: jaccard(&pred, truth)?,
        });
    }
    if records.is_empty() {
        return Err(CliError::Config(format!("no predictions found in {}", pred_dir.display())));
    }
    write_file(&out.join("metrics.csv"), write_metrics_csv(&records))?;
    Ok(records)
}

/// Reads a metrics CSV and writes summary.json, report.txt and boxplot.csv
/// (plus a normalised metrics.csv) into `out`. Returns the text table.
pub fn cmd_report(metrics: &Path, out: &Path) -> Result<String, CliError> {
    let text = fs::read_to_string(metrics).map_err(|e| CliError::Io(format!("{}: {e}", metrics.display())))?;
    let records = parse_metrics_csv(&text)?;
    let report = write_outputs(&records, out)?;
    Ok(report.to_table())
}
