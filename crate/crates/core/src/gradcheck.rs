//! Central finite-difference gradient checking.

use serde::Serialize;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Maximum accepted relative error.
    pub rel_tolerance: f64,
    /// Denominator floor for the relative error, so entries that are zero up
    /// to rounding are judged on an absolute scale.
    pub magnitude_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            rel_tolerance: 1e-4,
            magnitude_floor: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub passed: bool,
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `analytic` against central differences of `f` around `x`.
pub fn check_gradient<F>(mut f: F, x: &[f64], analytic: &[f64], cfg: &GradCheckConfig) -> GradCheckReport
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(x.len(), analytic.len(), "gradient length mismatch");
    let mut probe = x.to_vec();
    let mut report = GradCheckReport {
        checked: x.len(),
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        passed: true,
    };
    for i in 0..x.len() {
        probe[i] = x[i] + cfg.step;
        let plus = f(&probe);
        probe[i] = x[i] - cfg.step;
        let minus = f(&probe);
        probe[i] = x[i];
        let numeric = (plus - minus) / (2.0 * cfg.step);
        let abs = (analytic[i] - numeric).abs();
        let rel = relative_error(analytic[i], numeric, cfg.magnitude_floor);
        report.max_abs_error = report.max_abs_error.max(abs);
        if rel > report.max_rel_error || !rel.is_finite() {
            report.max_rel_error = rel;
            report.worst_index = i;
            report.worst_analytic = analytic[i];
            report.worst_numeric = numeric;
        }
    }
    report.passed = report.max_rel_error <= cfg.rel_tolerance;
    report
}
