//! Seeded synthetic cases: an ellipsoidal brain with one smooth cavity.
//!
//! Each patient gets a cavity shape (superellipsoid with a low-frequency
//! radial perturbation) that rescales slightly between timepoints. The
//! default channel models make T1C informative (dark core, bright rim) and
//! FLAIR unstable (core intensity redrawn per timepoint, so the cavity can be
//! brighter, darker or indistinguishable from tissue).

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pipeline::{largest_component, Connectivity};
use crate::seed::mix_seed;
use crate::volgrid::nifti::{self, NiftiError};
use crate::volgrid::{linear_index, Case, CaseDescriptor, LabelMask, Manifest, SequenceId, Volume3, VolumeError};

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("invalid phantom config: {0}")]
    InvalidConfig(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: NiftiError,
    },
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelModel {
    pub core_intensity: f64,
    pub rim_intensity: f64,
    /// Intensity of brain tissue outside the cavity and rim.
    pub background_intensity: f64,
    pub noise_sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelModels {
    pub t1: ChannelModel,
    pub t1c: ChannelModel,
    pub t2: ChannelModel,
    pub flair: ChannelModel,
}

impl ChannelModels {
    pub fn get(&self, seq: SequenceId) -> &ChannelModel {
        match seq {
            SequenceId::T1 => &self.t1,
            SequenceId::T1C => &self.t1c,
            SequenceId::T2 => &self.t2,
            SequenceId::FLAIR => &self.flair,
        }
    }

    /// Every channel shares the T1C model; useful as a symmetric control.
    pub fn symmetric(model: ChannelModel) -> Self {
        Self { t1: model, t1c: model, t2: model, flair: model }
    }
}

impl Default for ChannelModels {
    fn default() -> Self {
        let m = |core, rim, background, noise| ChannelModel {
            core_intensity: core,
            rim_intensity: rim,
            background_intensity: background,
            noise_sigma: noise,
        };
        Self {
            t1: m(0.45, 0.65, 0.75, 0.10),
            t1c: m(0.25, 1.35, 0.75, 0.06),
            t2: m(1.30, 0.95, 0.80, 0.15),
            flair: m(0.75, 0.75, 0.75, 0.12),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub grid: [usize; 3],
    /// Semi-axis range of the cavity, in voxels.
    pub cavity_radius_range: [f64; 2],
    pub rim_thickness: f64,
    pub channel_model: ChannelModels,
    /// Range of the per-timepoint multiplier applied to the FLAIR core.
    pub flair_timepoint_variation: [f64; 2],
    /// Largest fractional volume change between consecutive timepoints.
    pub drift: f64,
    /// Amplitude of the radial perturbation; 0 gives a pure superellipsoid.
    pub perturbation: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            grid: [48, 48, 48],
            cavity_radius_range: [5.0, 9.0],
            rim_thickness: 1.5,
            channel_model: ChannelModels::default(),
            flair_timepoint_variation: [0.5, 1.6],
            drift: 0.1,
            perturbation: 0.15,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<(), PhantomError> {
        let bad = |m: String| Err(PhantomError::InvalidConfig(m));
        let min_grid = *self.grid.iter().min().unwrap_or(&0);
        if min_grid < 4 || self.grid.iter().any(|&g| g > 1024) {
            return bad(format!("grid {:?} must be within 4..=1024 per axis", self.grid));
        }
        let [r_min, r_max] = self.cavity_radius_range;
        if !(r_min > 0.0 && r_min <= r_max && r_max < min_grid as f64 / 2.0) {
            return bad(format!(
                "cavity radius range {:?} must satisfy 0 < r_min <= r_max < {}",
                self.cavity_radius_range,
                min_grid as f64 / 2.0
            ));
        }
        if !(self.rim_thickness >= 0.0 && self.rim_thickness.is_finite()) {
            return bad(format!("rim_thickness {} must be >= 0", self.rim_thickness));
        }
        for seq in SequenceId::ALL {
            let m = self.channel_model.get(seq);
            if !(m.noise_sigma >= 0.0 && m.noise_sigma.is_finite()) {
                return bad(format!("{seq} noise_sigma {} must be >= 0", m.noise_sigma));
            }
            if ![m.core_intensity, m.rim_intensity, m.background_intensity].iter().all(|v| v.is_finite()) {
                return bad(format!("{seq} intensities must be finite"));
            }
        }
        let [lo, hi] = self.flair_timepoint_variation;
        if !(lo >= 0.0 && lo <= hi && hi.is_finite()) {
            return bad(format!(
                "flair_timepoint_variation {:?} must be an ordered non-negative range",
                self.flair_timepoint_variation
            ));
        }
        if !(0.0..1.0).contains(&self.drift) {
            return bad(format!("drift {} must lie in [0, 1)", self.drift));
        }
        if !(0.0..0.5).contains(&self.perturbation) {
            return bad(format!("perturbation {} must lie in [0, 0.5)", self.perturbation));
        }
        Ok(())
    }
}

/// Per-patient cavity geometry, shared by all timepoints.
#[derive(Debug, Clone)]
struct CavityShape {
    center: [f64; 3],
    radii: [f64; 3],
    exponent: f64,
    harmonics: [(f64, f64, f64, f64, f64); 3],
}

impl CavityShape {
    fn draw(config: &PhantomConfig, rng: &mut ChaCha8Rng) -> Self {
        let [r_min, r_max] = config.cavity_radius_range;
        let radii = [0; 3].map(|_| if r_max > r_min { rng.gen_range(r_min..=r_max) } else { r_min });
        let exponent = rng.gen_range(1.5..=3.0);
        let amp = config.perturbation / 3.0;
        let harmonics = [0; 3].map(|_| {
            (
                if amp > 0.0 { rng.gen_range(-amp..=amp) } else { 0.0 },
                f64::from(rng.gen_range(1u32..=3)),
                f64::from(rng.gen_range(1u32..=3)),
                rng.gen_range(0.0..2.0 * PI),
                rng.gen_range(0.0..2.0 * PI),
            )
        });
        let reach = r_max * (1.0 + config.perturbation) * 1.3 + config.rim_thickness;
        let center = [0, 1, 2].map(|a| {
            let g = config.grid[a] as f64;
            let mid = (g - 1.0) / 2.0;
            let slack = ((BRAIN_FRACTION * g - reach) * 0.5).max(0.0);
            if slack > 0.0 {
                mid + rng.gen_range(-slack..=slack)
            } else {
                mid
            }
        });
        Self { center, radii, exponent, harmonics }
    }

    /// Normalised radial coordinate of point `p` for a cavity scaled by `s`;
    /// the cavity is `q <= 1`.
    fn q(&self, p: [f64; 3], s: f64) -> f64 {
        let d = [0, 1, 2].map(|a| p[a] - self.center[a]);
        let norm = d
            .iter()
            .zip(&self.radii)
            .map(|(di, ri)| (di.abs() / (ri * s)).powf(self.exponent))
            .sum::<f64>()
            .powf(1.0 / self.exponent);
        let len = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        if len == 0.0 {
            return 0.0;
        }
        let theta = (d[2] / len).clamp(-1.0, 1.0).acos();
        let phi = d[1].atan2(d[0]);
        let radial = 1.0
            + self
                .harmonics
                .iter()
                .map(|&(a, l, m, p1, p2)| a * (l * theta + p1).sin() * (m * phi + p2).cos())
                .sum::<f64>();
        norm / radial
    }

    fn mean_radius(&self) -> f64 {
        self.radii.iter().sum::<f64>() / 3.0
    }
}

/// Brain ellipsoid semi-axes as a fraction of the grid extent.
const BRAIN_FRACTION: f64 = 0.42;
const SCALE_BOUNDS: (f64, f64) = (0.7, 1.3);

fn patient_rng(config: &PhantomConfig, patient_seed: u64, stream: u64, extra: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(&[config.seed, patient_seed, stream, extra]))
}

const STREAM_SHAPE: u64 = 1;
const STREAM_DRIFT: u64 = 2;
const STREAM_FLAIR: u64 = 3;
const STREAM_NOISE: u64 = 4;

/// Cavity scale at `timepoint`. Each step changes the volume by a factor in
/// `[1 - drift/2, 1]` (grow or shrink), so nested consecutive masks keep a
/// volume ratio of at least `1 - drift/2`.
fn scale_at(config: &PhantomConfig, patient_seed: u64, timepoint: u32) -> f64 {
    let mut rng = patient_rng(config, patient_seed, STREAM_DRIFT, 0);
    let mut s = 1.0f64;
    for _ in 0..timepoint {
        let u: f64 = rng.gen_range(0.0..=1.0);
        let ratio = (1.0 - 0.5 * config.drift * u).cbrt();
        let grow = rng.gen_bool(0.5);
        let up = s / ratio;
        let down = s * ratio;
        s = match (grow, up <= SCALE_BOUNDS.1, down >= SCALE_BOUNDS.0) {
            (true, true, _) | (false, true, false) => up,
            (false, _, true) | (true, false, true) => down,
            _ => s,
        };
    }
    s
}

fn flair_multiplier(config: &PhantomConfig, patient_seed: u64, timepoint: u32) -> f64 {
    let [lo, hi] = config.flair_timepoint_variation;
    if hi <= lo {
        return lo;
    }
    patient_rng(config, patient_seed, STREAM_FLAIR, u64::from(timepoint)).gen_range(lo..=hi)
}

pub fn patient_id(patient_seed: u64) -> String {
    format!("p{patient_seed:03}")
}

pub fn case_id(patient_seed: u64, timepoint: u32) -> String {
    format!("p{patient_seed:03}_t{timepoint}")
}

/// Renders one timepoint of one synthetic patient.
pub fn generate_case(config: &PhantomConfig, patient_seed: u64, timepoint: u32) -> Result<Case, PhantomError> {
    config.validate()?;
    let shape = CavityShape::draw(config, &mut patient_rng(config, patient_seed, STREAM_SHAPE, 0));
    let s = scale_at(config, patient_seed, timepoint);
    let rim_q = 1.0 + config.rim_thickness / (shape.mean_radius() * s);
    let dims = config.grid;
    let n = dims.iter().product::<usize>();
    let brain_axes = dims.map(|g| BRAIN_FRACTION * g as f64);
    let mid = dims.map(|g| (g as f64 - 1.0) / 2.0);

    // 0 outside brain, 1 tissue, 2 rim, 3 cavity
    let mut region = vec![0u8; n];
    let mut cavity = vec![0u8; n];
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let p = [x as f64, y as f64, z as f64];
                let i = linear_index(dims, x, y, z);
                let q = shape.q(p, s);
                if q <= 1.0 {
                    cavity[i] = 1;
                }
                let in_brain = (0..3).map(|a| ((p[a] - mid[a]) / brain_axes[a]).powi(2)).sum::<f64>() <= 1.0;
                region[i] = if q <= 1.0 {
                    3
                } else if q <= rim_q {
                    2
                } else if in_brain {
                    1
                } else {
                    0
                };
            }
        }
    }
    let mask = largest_component(&LabelMask::new(dims, cavity)?, Connectivity::Six);
    for (r, &m) in region.iter_mut().zip(mask.values()) {
        // cavity fragments dropped by the connectivity filter become rim
        if *r == 3 && m == 0 {
            *r = 2;
        }
    }

    let flair_mult = flair_multiplier(config, patient_seed, timepoint);
    let channels = SequenceId::ALL.map(|seq| {
        let model = config.channel_model.get(seq);
        let core = if seq == SequenceId::FLAIR { model.core_intensity * flair_mult } else { model.core_intensity };
        let mut rng = patient_rng(config, patient_seed, STREAM_NOISE, (u64::from(timepoint) << 8) | seq.index() as u64);
        let noise = Normal::new(0.0, model.noise_sigma).expect("validated sigma");
        let values: Vec<f32> = region
            .iter()
            .map(|&r| {
                let base = match r {
                    0 => return 0.0,
                    1 => model.background_intensity,
                    2 => model.rim_intensity,
                    _ => core,
                };
                let v = (base + noise.sample(&mut rng)) as f32;
                // exact zeros are reserved for outside-brain voxels
                if v == 0.0 {
                    f32::MIN_POSITIVE
                } else {
                    v
                }
            })
            .collect();
        Volume3::from_values(dims, values).expect("grid validated")
    });
    Ok(Case::new(case_id(patient_seed, timepoint), patient_id(patient_seed), timepoint, channels, Some(mask))?)
}

/// Timepoints `0..n_timepoints` of one patient.
pub fn generate_longitudinal(
    config: &PhantomConfig,
    patient_seed: u64,
    n_timepoints: u32,
) -> Result<Vec<Case>, PhantomError> {
    if n_timepoints == 0 {
        return Err(PhantomError::InvalidConfig("n_timepoints must be >= 1".into()));
    }
    (0..n_timepoints).map(|t| generate_case(config, patient_seed, t)).collect()
}

/// Writes every case as NIfTI files plus `manifest.json` into `out_dir` and
/// returns the manifest. Patient `p` uses patient seed `p`.
pub fn generate_dataset(
    config: &PhantomConfig,
    n_patients: usize,
    timepoints_per_patient: &[u32],
    out_dir: &Path,
) -> Result<Manifest, PhantomError> {
    config.validate()?;
    if n_patients == 0 {
        return Err(PhantomError::InvalidConfig("n_patients must be >= 1".into()));
    }
    if timepoints_per_patient.len() != n_patients {
        return Err(PhantomError::InvalidConfig(format!(
            "{} timepoint counts given for {n_patients} patients",
            timepoints_per_patient.len()
        )));
    }
    if timepoints_per_patient.contains(&0) {
        return Err(PhantomError::InvalidConfig("every patient needs >= 1 timepoint".into()));
    }
    let io = |path: &Path, source: NiftiError| PhantomError::Io { path: path.display().to_string(), source };
    fs::create_dir_all(out_dir).map_err(|e| io(out_dir, e.into()))?;
    let mut descriptors = Vec::new();
    for (p, &n_t) in timepoints_per_patient.iter().enumerate() {
        for case in generate_longitudinal(config, p as u64, n_t)? {
            let id = case.case_id().to_owned();
            let mut names = Vec::with_capacity(4);
            for seq in SequenceId::ALL {
                let name = format!("{id}_{}.nii", seq.key());
                let path = out_dir.join(&name);
                nifti::save_nifti(case.channel(seq), &path).map_err(|e| io(&path, e))?;
                names.push(name);
            }
            let mask_name = format!("{id}_mask.nii");
            let mask_path = out_dir.join(&mask_name);
            nifti::save_mask(case.mask().expect("phantoms carry masks"), &mask_path).map_err(|e| io(&mask_path, e))?;
            let mut names = names.into_iter();
            descriptors.push(CaseDescriptor {
                case_id: id,
                patient_id: case.patient_id().to_owned(),
                timepoint: case.timepoint(),
                t1: names.next().unwrap(),
                t1c: names.next().unwrap(),
                t2: names.next().unwrap(),
                flair: names.next().unwrap(),
                mask: Some(mask_name),
                normalize: true,
            });
        }
    }
    let manifest = Manifest { base_dir: out_dir.to_owned(), cases: descriptors };
    let path = out_dir.join("manifest.json");
    manifest.save(&path)?;
    Ok(manifest)
}
