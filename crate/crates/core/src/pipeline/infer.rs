use serde::{Deserialize, Serialize};

use super::{case_tensor, largest_component, ChannelSelection, Checkpoint, Connectivity, PipelineError};
use crate::autodiff::{ParamSet, Tape};
use crate::model::UNet;
use crate::volgrid::{linear_index, Case, LabelMask, Volume3};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub window: [usize; 3],
    pub overlap_fraction: f64,
    pub threshold: f64,
    pub connectivity: Connectivity,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self { window: [44, 44, 44], overlap_fraction: 0.5, threshold: 0.5, connectivity: Connectivity::TwentySix }
    }
}

impl InferenceConfig {
    pub fn validate(&self, divisor: usize) -> Result<(), PipelineError> {
        if self.window.iter().any(|&w| w == 0 || w % divisor != 0) {
            return Err(PipelineError::InvalidConfig(format!(
                "window {:?} must be a positive multiple of {divisor}",
                self.window
            )));
        }
        if !(0.0..=0.9).contains(&self.overlap_fraction) {
            return Err(PipelineError::InvalidConfig(format!(
                "overlap_fraction {} must lie in [0, 0.9]",
                self.overlap_fraction
            )));
        }
        if !self.threshold.is_finite() {
            return Err(PipelineError::InvalidConfig("threshold must be finite".into()));
        }
        Ok(())
    }
}

/// Window origins along one axis: stride `w * (1 - overlap)` from 0 until
/// the volume is covered. The last window may reach into zero padding.
fn axis_origins(dim: usize, window: usize, overlap: f64) -> Vec<usize> {
    let stride = ((window as f64 * (1.0 - overlap)).floor() as usize).max(1);
    let mut out = vec![0];
    while out[out.len() - 1] + window < dim {
        let next = out[out.len() - 1] + stride;
        out.push(next);
    }
    out
}

/// Sliding-window probabilities averaged over overlapping windows, then
/// thresholded (`p >= threshold`). No component filtering is applied.
pub fn predict_with(
    net: &UNet,
    params: &ParamSet,
    case: &Case,
    selection: &ChannelSelection,
    cfg: &InferenceConfig,
) -> Result<(Volume3, LabelMask), PipelineError> {
    cfg.validate(net.config().size_divisor())?;
    if selection.len() != net.config().in_channels {
        return Err(PipelineError::InvalidConfig(format!(
            "{} selected channels but the model takes {}",
            selection.len(),
            net.config().in_channels
        )));
    }
    let dims = case.dims();
    let w = cfg.window;
    let origins = [0, 1, 2].map(|a| axis_origins(dims[a], w[a], cfg.overlap_fraction));
    let n = dims.iter().product::<usize>();
    let mut sum = vec![0.0f64; n];
    let mut hits = vec![0u32; n];
    for &ox in &origins[0] {
        for &oy in &origins[1] {
            for &oz in &origins[2] {
                let mut tape = Tape::new();
                let vars = params.bind_frozen(&mut tape);
                let x = tape.constant(case_tensor(case, selection, [ox, oy, oz], w));
                let y = net.forward(&mut tape, &vars, x)?;
                let prob = tape.value(y);
                for lx in 0..w[0].min(dims[0] - ox) {
                    for ly in 0..w[1].min(dims[1] - oy) {
                        let row = &prob[(lx * w[1] + ly) * w[2]..];
                        for lz in 0..w[2].min(dims[2] - oz) {
                            let i = linear_index(dims, ox + lx, oy + ly, oz + lz);
                            sum[i] += row[lz];
                            hits[i] += 1;
                        }
                    }
                }
            }
        }
    }
    let mut probs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for (s, &h) in sum.iter().zip(&hits) {
        debug_assert!(h > 0);
        let p = s / f64::from(h);
        probs.push(p as f32);
        labels.push(u8::from(p >= cfg.threshold));
    }
    let volume = Volume3::new(dims, case.spacing(), probs).map_err(|e| PipelineError::InvalidConfig(e.to_string()))?;
    let mask = LabelMask::new(dims, labels).map_err(|e| PipelineError::InvalidConfig(e.to_string()))?;
    Ok((volume, mask))
}

/// Probability volume and thresholded mask for `case`.
pub fn predict(ckpt: &Checkpoint, case: &Case, cfg: &InferenceConfig) -> Result<(Volume3, LabelMask), PipelineError> {
    predict_with(&ckpt.network()?, ckpt.params(), case, &ckpt.channels, cfg)
}

/// [`predict`] followed by the largest-component filter.
pub fn segment(ckpt: &Checkpoint, case: &Case, cfg: &InferenceConfig) -> Result<(Volume3, LabelMask), PipelineError> {
    let (prob, mask) = predict(ckpt, case, cfg)?;
    Ok((prob, largest_component(&mask, cfg.connectivity)))
}
