use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::autodiff::{AutodiffError, Tape, Var};

/// Tversky loss weights: `alpha` on false positives, `beta` on false
/// negatives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { alpha: 0.2, beta: 0.8, epsilon: 1e-6 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let ok = self.alpha >= 0.0
            && self.beta >= 0.0
            && self.alpha + self.beta > 0.0
            && self.epsilon >= 0.0
            && self.alpha.is_finite()
            && self.beta.is_finite()
            && self.epsilon.is_finite();
        if ok {
            Ok(())
        } else {
            Err(ModelError::InvalidConfig(format!("bad loss weights {self:?}")))
        }
    }
}

/// `1 - (TP + eps) / (TP + alpha*FP + beta*FN + eps)` with soft counts
/// `TP = sum(p*g)`, `FP = sum(p*(1-g))`, `FN = sum((1-p)*g)`.
pub fn tversky_loss(tape: &mut Tape, pred: Var, target: Var, cfg: &LossConfig) -> Result<Var, ModelError> {
    tversky_loss_batch(tape, &[(pred, target)], cfg)
}

/// Tversky loss with the soft counts pooled over every `(pred, target)` pair.
pub fn tversky_loss_batch(tape: &mut Tape, pairs: &[(Var, Var)], cfg: &LossConfig) -> Result<Var, ModelError> {
    cfg.validate()?;
    let mut totals: Option<(Var, Var, Var)> = None;
    for &(pred, target) in pairs {
        if tape.shape(pred) != tape.shape(target) {
            return Err(AutodiffError::ShapeMismatch {
                op: "tversky_loss",
                detail: format!("{:?} vs {:?}", tape.shape(pred), tape.shape(target)),
            }
            .into());
        }
        let pg = tape.mul(pred, target)?;
        let tp = tape.sum(pg);
        let sp = tape.sum(pred);
        let sg = tape.sum(target);
        totals = Some(match totals {
            None => (tp, sp, sg),
            Some((a, b, c)) => (tape.add(a, tp)?, tape.add(b, sp)?, tape.add(c, sg)?),
        });
    }
    let Some((tp, sp, sg)) = totals else {
        return Err(ModelError::InvalidConfig("empty loss batch".into()));
    };
    let (alpha, beta, eps) = (cfg.alpha, cfg.beta, cfg.epsilon);
    // TP + alpha*(SP - TP) + beta*(SG - TP) + eps
    let num = tape.affine(tp, 1.0, eps);
    let d0 = tape.affine(tp, 1.0 - alpha - beta, eps);
    let d1 = tape.affine(sp, alpha, 0.0);
    let d2 = tape.affine(sg, beta, 0.0);
    let d01 = tape.add(d0, d1)?;
    let den = tape.add(d01, d2)?;
    let index = tape.div(num, den)?;
    Ok(tape.affine(index, -1.0, 1.0))
}

/// Default smoothing for [`soft_jaccard`].
pub const JACCARD_EPS: f64 = 1e-6;

/// `(sum(p*g) + eps) / (sum(p) + sum(g) - sum(p*g) + eps)`; equals the set
/// Jaccard index for binary inputs (up to `eps`).
pub fn soft_jaccard(pred: &[f64], target: &[f64], eps: f64) -> Result<f64, ModelError> {
    if pred.len() != target.len() {
        return Err(AutodiffError::ShapeMismatch {
            op: "soft_jaccard",
            detail: format!("{} vs {} elements", pred.len(), target.len()),
        }
        .into());
    }
    let (mut inter, mut sp, mut sg) = (0.0, 0.0, 0.0);
    for (&p, &g) in pred.iter().zip(target) {
        inter += p * g;
        sp += p;
        sg += g;
    }
    Ok((inter + eps) / (sp + sg - inter + eps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn loss_of(pred: &[f64], target: &[f64], cfg: LossConfig) -> f64 {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::new(vec![pred.len()], pred.to_vec()).unwrap());
        let g = tape.constant(Tensor::new(vec![target.len()], target.to_vec()).unwrap());
        let l = tversky_loss(&mut tape, p, g, &cfg).unwrap();
        tape.value(l)[0]
    }

    #[test]
    fn perfect_prediction() {
        let t = [1.0, 0.0, 1.0, 1.0, 0.0];
        assert!(loss_of(&t, &t, LossConfig::default()).abs() < 1e-5);
    }

    #[test]
    fn worked_examples() {
        let cfg = LossConfig::default();
        // TP 0.5, FP 0.5, FN 0.5 -> 0.5 / (0.5 + 0.1 + 0.4)
        assert!((loss_of(&[0.5, 0.5], &[1.0, 0.0], cfg) - 0.5).abs() < 1e-5);
        // TP 0.5, FN 0.5 -> 0.5 / 0.9
        assert!((loss_of(&[0.5], &[1.0], cfg) - (1.0 - 0.5 / 0.9)).abs() < 1e-5);
    }

    #[test]
    fn shape_mismatch() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::zeros(vec![2]));
        let g = tape.constant(Tensor::zeros(vec![3]));
        assert!(tversky_loss(&mut tape, p, g, &LossConfig::default()).is_err());
    }

    #[test]
    fn jaccard_examples() {
        assert!((soft_jaccard(&[1.0, 1.0, 0.0, 0.0], &[1.0, 0.0, 1.0, 0.0], 0.0).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!((soft_jaccard(&[1.0, 0.0], &[1.0, 0.0], JACCARD_EPS).unwrap() - 1.0).abs() < 1e-12);
        assert!(soft_jaccard(&[0.0, 0.0], &[1.0, 0.0], JACCARD_EPS).unwrap() < 1e-5);
        assert!(soft_jaccard(&[0.0], &[1.0, 0.0], 0.0).is_err());
    }

    #[test]
    fn rejects_negative_weights() {
        let cfg = LossConfig { alpha: -0.1, ..Default::default() };
        assert!(cfg.validate().is_err());
        let cfg = LossConfig { alpha: 0.0, beta: 0.0, ..Default::default() };
        assert!(cfg.validate().is_err());
    }
}
