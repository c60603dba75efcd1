//! The cross-validated comparison: every (sequence config, fold) unit trains
//! a network, segments its test fold and records per-case overlap.
//!
//! Seeds: folds use `mix(master, FOLDS_TAG)`, the train/validation split of
//! fold `f` uses `mix(master, SPLIT_TAG, f)` (shared by all configs so the
//! comparison stays paired), and unit `(c, f)` uses
//! `u = mix(master, c, f)` with `c` the canonical config index; the model,
//! sampler and training seeds are `mix(u, 0)`, `mix(u, 1)` and `mix(u, 2)`.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use cavseg::evalstat::{
    compare_report, dice, jaccard, make_folds, parse_metrics_csv, train_val_split, write_metrics_csv, CompareReport,
    FoldMode, FoldSplit, MetricRecord, SequenceConfig,
};
use cavseg::model::UNetConfig;
use cavseg::pipeline::{segment, train, Checkpoint, InferenceConfig, SamplerConfig, TrainConfig};
use cavseg::seed::mix_seed;
use cavseg::volgrid::{Case, Manifest};

use crate::{pipeline_error, read_config, relative_to, training_error, write_file, CliError};

pub const FOLDS_TAG: u64 = 0xF01D;
pub const SPLIT_TAG: u64 = 0x5B11;
const SENTINEL: &str = "COMPLETE";

fn default_configs() -> Vec<SequenceConfig> {
    SequenceConfig::ALL.to_vec()
}

fn default_folds() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Resolved against the config file's directory when relative.
    pub manifest: PathBuf,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default = "default_configs")]
    pub configs: Vec<SequenceConfig>,
    #[serde(default = "default_folds")]
    pub n_folds: usize,
    #[serde(default)]
    pub fold_mode: FoldMode,
    /// Subset of folds to run; all folds when absent.
    #[serde(default)]
    pub folds: Option<Vec<usize>>,
    #[serde(default)]
    pub model: UNetConfig,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub inference: InferenceConfig,
    #[serde(default)]
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn new(manifest: impl Into<PathBuf>) -> Self {
        Self {
            manifest: manifest.into(),
            output_dir: None,
            configs: default_configs(),
            n_folds: default_folds(),
            fold_mode: FoldMode::default(),
            folds: None,
            model: UNetConfig::default(),
            sampler: SamplerConfig::default(),
            train: TrainConfig::default(),
            inference: InferenceConfig::default(),
            seed: 0,
        }
    }

    fn fold_list(&self) -> Result<Vec<usize>, CliError> {
        let folds = self.folds.clone().unwrap_or_else(|| (0..self.n_folds).collect());
        if folds.is_empty() {
            return Err(CliError::Config("no folds selected".into()));
        }
        if let Some(&bad) = folds.iter().find(|&&f| f >= self.n_folds) {
            return Err(CliError::Config(format!("fold {bad} out of range for {} folds", self.n_folds)));
        }
        let mut folds = folds;
        folds.sort_unstable();
        folds.dedup();
        Ok(folds)
    }
}

/// Everything a unit's outputs depend on; its hash is the resume key.
#[derive(Debug, Serialize)]
struct UnitSpec {
    config: SequenceConfig,
    fold: usize,
    seed: u64,
    train_cases: Vec<String>,
    val_cases: Vec<String>,
    test_cases: Vec<String>,
    model: UNetConfig,
    sampler: SamplerConfig,
    train: TrainConfig,
    inference: InferenceConfig,
}

impl UnitSpec {
    fn dir_name(&self) -> String {
        format!("{}_fold{}", self.config, self.fold)
    }

    fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("serialisable");
        hex::encode(Sha256::digest(json))
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub records: Vec<MetricRecord>,
    pub report: CompareReport,
    pub units_run: usize,
    pub units_skipped: usize,
}

fn build_units(cfg: &ExperimentConfig, cases: &[Case], split: &FoldSplit) -> Result<Vec<UnitSpec>, CliError> {
    let mut configs = cfg.configs.clone();
    configs.sort();
    configs.dedup();
    if configs.is_empty() {
        return Err(CliError::Config("at least one sequence config is required".into()));
    }
    let folds = cfg.fold_list()?;
    let mut per_fold = HashMap::new();
    for &f in &folds {
        let test: Vec<String> = split.members(f);
        let rest: Vec<String> =
            cases.iter().map(|c| c.case_id().to_owned()).filter(|id| split.fold_of(id) != Some(f)).collect();
        let (train_ids, val_ids) = train_val_split(&rest, mix_seed(&[cfg.seed, SPLIT_TAG, f as u64]))?;
        per_fold.insert(f, (train_ids, val_ids, test));
    }
    let mut units = Vec::new();
    for &c in &configs {
        for &f in &folds {
            let (train_ids, val_ids, test_ids) = &per_fold[&f];
            let seed = mix_seed(&[cfg.seed, c.index() as u64, f as u64]);
            let model = UNetConfig { in_channels: c.channels().len(), seed: mix_seed(&[seed, 0]), ..cfg.model.clone() };
            model.validate().map_err(|e| CliError::Config(e.to_string()))?;
            units.push(UnitSpec {
                config: c,
                fold: f,
                seed,
                train_cases: train_ids.clone(),
                val_cases: val_ids.clone(),
                test_cases: test_ids.clone(),
                model,
                sampler: SamplerConfig { seed: mix_seed(&[seed, 1]), ..cfg.sampler.clone() },
                train: TrainConfig { seed: mix_seed(&[seed, 2]), ..cfg.train.clone() },
                inference: cfg.inference.clone(),
            });
        }
    }
    Ok(units)
}

/// Returns the unit's records and whether it was already complete.
fn run_unit(
    unit: &UnitSpec,
    cases: &[Case],
    index: &HashMap<&str, usize>,
    root: &Path,
) -> Result<(Vec<MetricRecord>, bool), CliError> {
    let dir = root.join("units").join(unit.dir_name());
    let hash = unit.hash();
    let metrics_path = dir.join("metrics.csv");
    if fs::read_to_string(dir.join(SENTINEL)).is_ok_and(|s| s.trim() == hash) {
        if let Ok(text) = fs::read_to_string(&metrics_path) {
            if let Ok(records) = parse_metrics_csv(&text) {
                if Checkpoint::load(&dir).is_ok() {
                    return Ok((records, true));
                }
            }
        }
    }
    let select = |ids: &[String]| -> Vec<Case> { ids.iter().map(|id| cases[index[id.as_str()]].clone()).collect() };
    let train_cases = select(&unit.train_cases);
    let val_cases = select(&unit.val_cases);
    let ckpt = train(&train_cases, &val_cases, &unit.config.channels(), &unit.model, &unit.sampler, &unit.train)
        .map_err(training_error)?;
    ckpt.save(&dir).map_err(pipeline_error)?;

    let mut records = Vec::with_capacity(unit.test_cases.len());
    for id in &unit.test_cases {
        let case = &cases[index[id.as_str()]];
        let truth = case.mask().expect("checked at load");
        let (_, pred) = segment(&ckpt, case, &unit.inference).map_err(pipeline_error)?;
        records.push(MetricRecord {
            case_id: id.clone(),
            patient_id: case.patient_id().to_owned(),
            fold: unit.fold,
            config: unit.config,
            dice: dice(&pred, truth)?,
            jaccard: jaccard(&pred, truth)?,
        });
    }
    write_file(&dir.join("unit.json"), serde_json::to_string_pretty(unit).expect("serialisable") + "\n")?;
    write_file(&metrics_path, write_metrics_csv(&records))?;
    write_file(&dir.join(SENTINEL), format!("{hash}\n"))?;
    Ok((records, false))
}

// filled by whichever worker ran the unit; the flag marks a resumed unit
type UnitSlot = Mutex<Option<Result<(Vec<MetricRecord>, bool), CliError>>>;

/// Runs (or resumes) the whole experiment and writes the aggregate outputs
/// into `out`.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    config_path: Option<&Path>,
    out: &Path,
    jobs: usize,
) -> Result<ExperimentOutcome, CliError> {
    let manifest_path = relative_to(config_path, &cfg.manifest);
    let manifest = Manifest::load(&manifest_path)?;
    let cases = manifest.load_all()?;
    if let Some(c) = cases.iter().find(|c| c.mask().is_none()) {
        return Err(CliError::Config(format!("case {} has no mask", c.case_id())));
    }
    let pairs: Vec<(String, String)> =
        cases.iter().map(|c| (c.case_id().to_owned(), c.patient_id().to_owned())).collect();
    let split = make_folds(&pairs, cfg.n_folds, cfg.fold_mode, mix_seed(&[cfg.seed, FOLDS_TAG]))?;
    let units = build_units(cfg, &cases, &split)?;
    write_file(&out.join("folds.json"), serde_json::to_string_pretty(&split).expect("serialisable") + "\n")?;

    let index: HashMap<&str, usize> = cases.iter().enumerate().map(|(i, c)| (c.case_id(), i)).collect();
    let results: Vec<UnitSlot> = units.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = jobs.clamp(1, units.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(unit) = units.get(i) else { break };
                let started = Instant::now();
                let result = run_unit(unit, &cases, &index, out);
                match &result {
                    Ok((records, skipped)) => {
                        let mean = records.iter().map(|r| r.dice).sum::<f64>() / records.len().max(1) as f64;
                        log::info!(
                            "unit {}: {} test cases, mean dice {mean:.4}, {} in {:.1}s",
                            unit.dir_name(),
                            records.len(),
                            if *skipped { "resumed" } else { "trained" },
                            started.elapsed().as_secs_f64()
                        );
                    }
                    Err(e) => log::error!("unit {}: {e}", unit.dir_name()),
                }
                *results[i].lock().expect("unpoisoned") = Some(result);
            });
        }
    });

    let mut records = Vec::new();
    let (mut run, mut skipped) = (0, 0);
    for slot in results {
        let (r, was_skipped) = slot.into_inner().expect("unpoisoned").expect("every unit ran")?;
        records.extend(r);
        if was_skipped {
            skipped += 1;
        } else {
            run += 1;
        }
    }
    let report = write_outputs(&records, out)?;
    Ok(ExperimentOutcome { records, report, units_run: run, units_skipped: skipped })
}

/// Writes metrics.csv, summary.json, report.txt and boxplot.csv.
pub(crate) fn write_outputs(records: &[MetricRecord], out: &Path) -> Result<CompareReport, CliError> {
    let report = compare_report(records)?;
    write_file(&out.join("metrics.csv"), write_metrics_csv(records))?;
    write_file(&out.join("summary.json"), report.to_json())?;
    write_file(&out.join("report.txt"), report.to_table())?;
    write_file(&out.join("boxplot.csv"), report.boxplot_csv())?;
    Ok(report)
}

pub struct ExperimentArgs {
    pub config: PathBuf,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub jobs: usize,
}

pub fn cmd_experiment(args: &ExperimentArgs) -> Result<ExperimentOutcome, CliError> {
    let mut cfg: ExperimentConfig = read_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let out = args
        .out
        .clone()
        .or_else(|| cfg.output_dir.as_ref().map(|o| relative_to(Some(&args.config), o)))
        .ok_or_else(|| CliError::Config("no output directory (--out or output_dir)".into()))?;
    run_experiment(&cfg, Some(&args.config), &out, args.jobs)
}
