use alloc::string::String;
use alloc::vec::Vec;

/// Outcome of a central finite-difference sweep over one parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

impl FdReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_err <= tolerance
    }
}

impl core::fmt::Display for FdReport {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(
            f,
            "{}: max rel err {:.3e} over {} coords (worst at {}: analytic {:.6e}, numeric {:.6e})",
            self.name, self.max_rel_err, self.checked, self.worst_index, self.worst_analytic, self.worst_numeric
        )
    }
}

/// Central-difference check of an analytic gradient.
///
/// For each coordinate: numeric = (f(x + h e_i) - f(x - h e_i)) / 2h, and
/// the relative error is `|analytic - numeric| / max(|analytic|, |numeric|,
/// 1e-8)`.
pub fn finite_diff_check<F>(name: &str, mut f: F, x0: &[f64], analytic: &[f64], h: f64) -> FdReport
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(x0.len(), analytic.len(), "gradient shape mismatch");
    let mut x: Vec<f64> = x0.into();
    let mut report = FdReport {
        name: String::from(name),
        checked: x0.len(),
        max_rel_err: 0.0,
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
    };
    for i in 0..x0.len() {
        let orig = x[i];
        x[i] = orig + h;
        let fp = f(&x);
        x[i] = orig - h;
        let fm = f(&x);
        x[i] = orig;
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_index = i;
            report.worst_analytic = a;
            report.worst_numeric = numeric;
        }
    }
    report
}
