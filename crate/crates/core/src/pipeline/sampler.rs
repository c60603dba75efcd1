use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ChannelSelection, PipelineError};
use crate::autodiff::Tensor;
use crate::volgrid::{coords, linear_index, Case, LabelMask};

/// Attempts at drawing a background-only origin before giving up.
pub(crate) const BACKGROUND_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub patch_size: [usize; 3],
    /// Fraction of each batch that must contain foreground.
    pub fg_fraction: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { patch_size: [44, 44, 44], fg_fraction: 0.8, seed: 0 }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if !(0.0..=1.0).contains(&self.fg_fraction) {
            return Err(PipelineError::InvalidConfig(format!("fg_fraction {} must lie in [0, 1]", self.fg_fraction)));
        }
        if self.patch_size.contains(&0) {
            return Err(PipelineError::InvalidConfig(format!("patch_size {:?} must be positive", self.patch_size)));
        }
        Ok(())
    }

    /// Foreground-containing patches required among `k`.
    pub fn foreground_quota(&self, k: usize) -> usize {
        ((self.fg_fraction * k as f64).round() as usize).min(k)
    }
}

/// One training example cut from a case.
#[derive(Debug, Clone)]
pub struct Patch {
    /// `[channels, px, py, pz]`.
    pub input: Tensor,
    /// `[1, px, py, pz]` with values in {0, 1}.
    pub label: Tensor,
    pub origin: [usize; 3],
    /// Drawn to contain foreground.
    pub foreground: bool,
    /// A background patch was requested but none was found; this patch
    /// contains foreground.
    pub fallback: bool,
}

/// Summed-volume table of a mask, padded by one on each low side.
pub(crate) struct MaskIntegral {
    dims: [usize; 3],
    table: Vec<u32>,
}

impl MaskIntegral {
    pub(crate) fn new(mask: &LabelMask) -> Self {
        let [nx, ny, nz] = mask.dims();
        let (sx, sy) = (nx + 1, ny + 1);
        let mut table = vec![0u32; sx * sy * (nz + 1)];
        let at = |x: usize, y: usize, z: usize| x + sx * (y + sy * z);
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let v = u32::from(mask.get(x, y, z));
                    table[at(x + 1, y + 1, z + 1)] =
                        v + table[at(x, y + 1, z + 1)] + table[at(x + 1, y, z + 1)] + table[at(x + 1, y + 1, z)]
                            - table[at(x, y, z + 1)]
                            - table[at(x, y + 1, z)]
                            - table[at(x + 1, y, z)]
                            + table[at(x, y, z)];
                }
            }
        }
        Self { dims: mask.dims(), table }
    }

    /// Foreground count inside the box `[o, o + size)`.
    pub(crate) fn count(&self, o: [usize; 3], size: [usize; 3]) -> u32 {
        let (sx, sy) = (self.dims[0] + 1, self.dims[1] + 1);
        let at = |x: usize, y: usize, z: usize| self.table[x + sx * (y + sy * z)];
        let [x0, y0, z0] = o;
        let [x1, y1, z1] = [o[0] + size[0], o[1] + size[1], o[2] + size[2]];
        // inclusion-exclusion in u32 wraps but the final value is exact
        at(x1, y1, z1)
            .wrapping_sub(at(x0, y1, z1))
            .wrapping_sub(at(x1, y0, z1))
            .wrapping_sub(at(x1, y1, z0))
            .wrapping_add(at(x0, y0, z1))
            .wrapping_add(at(x0, y1, z0))
            .wrapping_add(at(x1, y0, z0))
            .wrapping_sub(at(x0, y0, z0))
    }
}

/// Copies the selected channels of the box `[origin, origin + size)` into a
/// `[c, sx, sy, sz]` tensor; voxels past the volume edge read as zero.
pub fn case_tensor(case: &Case, selection: &ChannelSelection, origin: [usize; 3], size: [usize; 3]) -> Tensor {
    let dims = case.dims();
    let per = size[0] * size[1] * size[2];
    let mut data = vec![0.0; selection.len() * per];
    for (c, &seq) in selection.sequences().iter().enumerate() {
        let vol = case.channel(seq).values();
        let out = &mut data[c * per..(c + 1) * per];
        for x in 0..size[0] {
            let gx = origin[0] + x;
            if gx >= dims[0] {
                break;
            }
            for y in 0..size[1] {
                let gy = origin[1] + y;
                if gy >= dims[1] {
                    break;
                }
                let row = &mut out[(x * size[1] + y) * size[2]..][..size[2]];
                for (z, slot) in row.iter_mut().enumerate() {
                    let gz = origin[2] + z;
                    if gz >= dims[2] {
                        break;
                    }
                    *slot = f64::from(vol[linear_index(dims, gx, gy, gz)]);
                }
            }
        }
    }
    Tensor::new(vec![selection.len(), size[0], size[1], size[2]], data).expect("shape")
}

fn mask_tensor(mask: &LabelMask, origin: [usize; 3], size: [usize; 3]) -> Tensor {
    let mut data = Vec::with_capacity(size.iter().product());
    for x in 0..size[0] {
        for y in 0..size[1] {
            for z in 0..size[2] {
                data.push(f64::from(u8::from(mask.get(origin[0] + x, origin[1] + y, origin[2] + z))));
            }
        }
    }
    Tensor::new(vec![1, size[0], size[1], size[2]], data).expect("shape")
}

/// Prepared sampling state for one case.
pub(crate) struct CaseSampler<'a> {
    case: &'a Case,
    mask: &'a LabelMask,
    foreground: Vec<usize>,
    integral: MaskIntegral,
    patch: [usize; 3],
}

impl<'a> CaseSampler<'a> {
    pub(crate) fn new(case: &'a Case, patch: [usize; 3]) -> Result<Self, PipelineError> {
        let mask = case.mask().ok_or_else(|| PipelineError::MissingMask(case.case_id().to_owned()))?;
        let dims = case.dims();
        if (0..3).any(|a| patch[a] > dims[a] || patch[a] == 0) {
            return Err(PipelineError::PatchTooLarge { patch, dims });
        }
        let foreground: Vec<usize> =
            mask.values().iter().enumerate().filter_map(|(i, &v)| (v != 0).then_some(i)).collect();
        if foreground.is_empty() {
            return Err(PipelineError::NoForeground(case.case_id().to_owned()));
        }
        Ok(Self { case, mask, foreground, integral: MaskIntegral::new(mask), patch })
    }

    fn cut(&self, selection: &ChannelSelection, origin: [usize; 3], foreground: bool, fallback: bool) -> Patch {
        Patch {
            input: case_tensor(self.case, selection, origin, self.patch),
            label: mask_tensor(self.mask, origin, self.patch),
            origin,
            foreground,
            fallback,
        }
    }

    /// Uniform foreground voxel, then a uniform origin among those whose
    /// patch covers it.
    fn foreground_origin(&self, rng: &mut ChaCha8Rng) -> [usize; 3] {
        let dims = self.case.dims();
        let v = coords(dims, self.foreground[rng.gen_range(0..self.foreground.len())]);
        [0, 1, 2].map(|a| {
            let lo = (v[a] + 1).saturating_sub(self.patch[a]);
            let hi = v[a].min(dims[a] - self.patch[a]);
            rng.gen_range(lo..=hi)
        })
    }

    fn uniform_origin(&self, rng: &mut ChaCha8Rng) -> [usize; 3] {
        let dims = self.case.dims();
        [0, 1, 2].map(|a| rng.gen_range(0..=dims[a] - self.patch[a]))
    }

    pub(crate) fn draw(&self, selection: &ChannelSelection, foreground: bool, rng: &mut ChaCha8Rng) -> Patch {
        if foreground {
            let o = self.foreground_origin(rng);
            return self.cut(selection, o, true, false);
        }
        let mut last = [0; 3];
        for _ in 0..BACKGROUND_ATTEMPTS {
            last = self.uniform_origin(rng);
            if self.integral.count(last, self.patch) == 0 {
                return self.cut(selection, last, false, false);
            }
        }
        log::warn!(
            "case {}: no background-only {:?} patch after {BACKGROUND_ATTEMPTS} attempts; using a foreground patch",
            self.case.case_id(),
            self.patch
        );
        self.cut(selection, last, false, true)
    }
}

/// Draws `k` patches: the first `round(fg_fraction * k)` contain foreground,
/// the rest are background-only unless the fallback flag is set.
pub fn sample_patches(
    case: &Case,
    selection: &ChannelSelection,
    k: usize,
    cfg: &SamplerConfig,
) -> Result<Vec<Patch>, PipelineError> {
    cfg.validate()?;
    if k == 0 {
        return Err(PipelineError::InvalidConfig("k must be >= 1".into()));
    }
    let sampler = CaseSampler::new(case, cfg.patch_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let quota = cfg.foreground_quota(k);
    Ok((0..k).map(|i| sampler.draw(selection, i < quota, &mut rng)).collect())
}
