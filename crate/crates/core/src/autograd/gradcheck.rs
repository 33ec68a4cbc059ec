use super::{AutogradError, Tape, Tensor, Var};

/// Denominator floor for relative errors, so near-zero gradients are judged
/// on absolute error instead of amplified finite-difference noise.
const REL_FLOOR: f64 = 1e-3;

/// Outcome of comparing an analytic gradient with central differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Flat index of the worst coordinate.
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// Closest approach to a relu / argmax / top-k boundary during the
    /// analytic pass; below the finite-difference step the check is invalid.
    pub kink_distance: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub failure: Option<String>,
}

/// Checks `f`'s reverse-mode gradient at `point` against central differences.
///
/// The relative error at each coordinate is `|a − n| / max(|a|, |n|, 1e-3)`.
/// Non-finite values anywhere are reported as failures with their location.
pub fn grad_check<F>(f: F, point: &Tensor, step: f64, tolerance: f64) -> GradCheckReport
where
    F: for<'t> Fn(Var<'t>) -> Result<Var<'t>, AutogradError>,
{
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: Vec::new(),
        numeric: Vec::new(),
        kink_distance: f64::INFINITY,
        tolerance,
        passed: false,
        failure: None,
    };
    if !point.is_finite() {
        report.failure = Some("non-finite input point".into());
        return report;
    }

    let tape = Tape::new();
    let x = tape.leaf(point.clone(), true);
    let analytic = match f(x).and_then(|loss| tape.backward(loss)) {
        Ok(grads) => grads.get(x).cloned().expect("leaf gradient"),
        Err(e) => {
            report.failure = Some(format!("analytic pass failed: {e}"));
            return report;
        }
    };
    report.kink_distance = tape.kink_distance();
    if let Some(i) = analytic.data().iter().position(|g| !g.is_finite()) {
        report.failure = Some(format!("non-finite analytic gradient at index {i}"));
        return report;
    }

    let eval = |p: Tensor| -> Result<f64, AutogradError> {
        let tape = Tape::new();
        let v = tape.leaf(p, false);
        Ok(f(v)?.item())
    };

    let mut numeric = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += step;
        let mut minus = point.clone();
        minus.data_mut()[i] -= step;
        let (fp, fm) = match (eval(plus), eval(minus)) {
            (Ok(a), Ok(b)) => (a, b),
            (Err(e), _) | (_, Err(e)) => {
                report.failure = Some(format!("perturbed evaluation at index {i} failed: {e}"));
                return report;
            }
        };
        if !fp.is_finite() || !fm.is_finite() {
            report.failure = Some(format!("non-finite loss when perturbing index {i}"));
            return report;
        }
        numeric.push((fp - fm) / (2.0 * step));
    }

    for (i, (&a, &n)) in analytic.data().iter().zip(&numeric).enumerate() {
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = i;
        }
    }
    report.analytic = analytic.into_data();
    report.numeric = numeric;
    report.passed = report.max_rel_error < tolerance;
    report
}
