use super::{AutodiffError, Tape, Tensor, Var};

/// Gradients smaller than this are compared in absolute terms.
const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// `(input index, element index)` of the largest relative error.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    pub tol: f64,
    pub passed: bool,
}

fn eval<F>(f: &F, inputs: &[Tensor]) -> Result<f64, AutodiffError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, AutodiffError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    match tape.value(out) {
        [v] => Ok(*v),
        _ => Err(AutodiffError::NotScalar(tape.shape(out).to_vec())),
    }
}

/// Compares the tape gradient of scalar `f` against central differences for
/// every element of every input. Relative error is
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-6)`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], h: f64, tol: f64) -> Result<GradCheckReport, AutodiffError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, AutodiffError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("shape").with_grad()))
        .collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;

    let mut report =
        GradCheckReport { max_rel_error: 0.0, max_abs_error: 0.0, worst: None, checked: 0, tol, passed: true };
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (i, &var) in vars.iter().enumerate() {
        let zeros = vec![0.0; inputs[i].len()];
        let analytic = tape.grad(var).unwrap_or(&zeros).to_vec();
        for j in 0..inputs[i].len() {
            let x = inputs[i].data()[j];
            let (xp, xm) = (x + h, x - h);
            probe[i].data_mut()[j] = xp;
            let fp = eval(&f, &probe)?;
            probe[i].data_mut()[j] = xm;
            let fm = eval(&f, &probe)?;
            probe[i].data_mut()[j] = x;
            // divide by the step actually taken after rounding
            let numeric = (fp - fm) / (xp - xm);
            let a = analytic[j];
            let abs = (a - numeric).abs();
            let mut rel = abs / a.abs().max(numeric.abs()).max(REL_FLOOR);
            if rel.is_nan() {
                rel = f64::INFINITY;
            }
            report.checked += 1;
            report.max_abs_error = report.max_abs_error.max(if abs.is_nan() { f64::INFINITY } else { abs });
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((i, j));
            }
        }
    }
    report.passed = report.max_rel_error < tol;
    Ok(report)
}
