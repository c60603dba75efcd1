use serde::{Deserialize, Serialize};

use super::EvalError;

/// Tukey box-plot summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub whisker_low: f64,
    pub whisker_high: f64,
    pub outliers: Vec<f64>,
}

/// Linear interpolation between order statistics at position `(n-1)*q` of
/// an already sorted slice.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = (sorted.len() - 1) as f64 * q;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Quartiles, whiskers at the most extreme values inside the 1.5 IQR fences,
/// and everything beyond the fences as outliers (in ascending order).
pub fn box_stats(values: &[f64]) -> Result<BoxStats, EvalError> {
    if values.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(EvalError::Parse("NaN in box-plot input".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q1 = quantile(&sorted, 0.25);
    let median = quantile(&sorted, 0.5);
    let q3 = quantile(&sorted, 0.75);
    let iqr = q3 - q1;
    let (lo_fence, hi_fence) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
    let inside: Vec<f64> = sorted.iter().copied().filter(|&v| v >= lo_fence && v <= hi_fence).collect();
    let outliers = sorted.iter().copied().filter(|&v| v < lo_fence || v > hi_fence).collect();
    Ok(BoxStats {
        median,
        q1,
        q3,
        // the median always lies inside the fences, so `inside` is non-empty
        whisker_low: inside[0],
        whisker_high: inside[inside.len() - 1],
        outliers,
    })
}
