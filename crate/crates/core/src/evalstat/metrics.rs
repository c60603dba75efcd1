use super::EvalError;
use crate::volgrid::LabelMask;

fn counts(a: &LabelMask, b: &LabelMask) -> Result<(usize, usize, usize), EvalError> {
    if a.dims() != b.dims() {
        return Err(EvalError::ShapeMismatch(a.dims(), b.dims()));
    }
    let (mut inter, mut na, mut nb) = (0, 0, 0);
    for (&x, &y) in a.values().iter().zip(b.values()) {
        let (x, y) = (x != 0, y != 0);
        inter += usize::from(x && y);
        na += usize::from(x);
        nb += usize::from(y);
    }
    Ok((inter, na, nb))
}

/// `2|A∩B| / (|A| + |B|)`; 1 when both masks are empty.
pub fn dice(a: &LabelMask, b: &LabelMask) -> Result<f64, EvalError> {
    let (inter, na, nb) = counts(a, b)?;
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// `|A∩B| / |A∪B|`; 1 when both masks are empty.
pub fn jaccard(a: &LabelMask, b: &LabelMask) -> Result<f64, EvalError> {
    let (inter, na, nb) = counts(a, b)?;
    let union = na + nb - inter;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}
