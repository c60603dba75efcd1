use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::EvalError;

/// Largest effective sample size that gets the exact null distribution.
pub const EXACT_MAX_N: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WilcoxonMethod {
    Exact,
    NormalApproximation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Pairs left after dropping zero differences.
    pub n_effective: usize,
    /// `min(W+, W-)`.
    pub statistic: f64,
    pub w_plus: f64,
    pub w_minus: f64,
    pub p_two_sided: f64,
    pub method: WilcoxonMethod,
}

/// Average ranks (1-based) of `values`; ties share the mean of their
/// positions.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // positions start+1 ..= end
        let avg = (start + 1 + end) as f64 / 2.0;
        for &k in &order[start..end] {
            ranks[k] = avg;
        }
        start = end;
    }
    ranks
}

/// `P(W+ <= w)` under the null of independent fair signs, for ranks given
/// doubled (so mid-ranks are integers) and `w` doubled likewise.
pub fn exact_lower_tail(doubled_ranks: &[u64], doubled_w: u64) -> f64 {
    let total: u64 = doubled_ranks.iter().sum();
    // counts[s] = number of sign assignments whose positive-rank sum is s
    let mut counts = vec![0u64; total as usize + 1];
    counts[0] = 1;
    let mut reach = 0usize;
    for &r in doubled_ranks {
        let r = r as usize;
        for s in (0..=reach).rev() {
            let c = counts[s];
            if c != 0 {
                counts[s + r] += c;
            }
        }
        reach += r;
    }
    let hit: u64 = counts.iter().take(doubled_w as usize + 1).sum();
    hit as f64 / (doubled_ranks.len() as f64).exp2()
}

/// Two-sided Wilcoxon signed-rank test of `a - b` with zero differences
/// dropped and tied magnitudes given average ranks. Exact for at most
/// [`EXACT_MAX_N`] effective pairs, otherwise a normal approximation with tie
/// correction and a 0.5 continuity correction.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonResult, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    if diffs.iter().any(|d| d.is_nan()) {
        return Err(EvalError::Parse("NaN in paired samples".into()));
    }
    let n = diffs.len();
    if n == 0 {
        return Err(EvalError::AllZeroDifferences);
    }
    let magnitudes: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let ranks = average_ranks(&magnitudes);
    let w_plus: f64 = diffs.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let w_minus = (n * (n + 1)) as f64 / 2.0 - w_plus;
    let w = w_plus.min(w_minus);

    let (p, method) = if n <= EXACT_MAX_N {
        let doubled: Vec<u64> = ranks.iter().map(|r| (2.0 * r).round() as u64).collect();
        let tail = exact_lower_tail(&doubled, (2.0 * w).round() as u64);
        (2.0 * tail, WilcoxonMethod::Exact)
    } else {
        let nf = n as f64;
        let mean = nf * (nf + 1.0) / 4.0;
        let mut tie_term = 0.0;
        let mut sorted = magnitudes.clone();
        sorted.sort_by(f64::total_cmp);
        let mut i = 0;
        while i < sorted.len() {
            let mut j = i + 1;
            while j < sorted.len() && sorted[j] == sorted[i] {
                j += 1;
            }
            let t = (j - i) as f64;
            tie_term += t * t * t - t;
            i = j;
        }
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
        let z = ((mean - w).abs() - 0.5).max(0.0) / var.sqrt();
        let normal = Normal::new(0.0, 1.0).expect("standard normal");
        (2.0 * normal.cdf(-z), WilcoxonMethod::NormalApproximation)
    };
    Ok(WilcoxonResult {
        n_effective: n,
        statistic: w,
        w_plus,
        w_minus,
        p_two_sided: p.clamp(f64::MIN_POSITIVE, 1.0),
        method,
    })
}
