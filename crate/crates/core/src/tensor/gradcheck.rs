//! Central-difference gradient checking.

/// `|a − n| / max(1, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_coord: Option<usize>,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// Compare `analytic[j]` against `(f(θ + εe_j) − f(θ − εe_j)) / 2ε` for every
/// coordinate in `coords`.
pub fn grad_check<F>(
    theta: &[f64],
    analytic: &[f64],
    eps: f64,
    coords: impl IntoIterator<Item = usize>,
    mut f: F,
) -> GradCheckReport
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(theta.len(), analytic.len(), "gradient length mismatch");
    assert!(eps > 0.0);
    let mut probe = theta.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_coord: None,
        checked: 0,
    };
    for j in coords {
        let orig = probe[j];
        probe[j] = orig + eps;
        let hi = f(&probe);
        probe[j] = orig - eps;
        let lo = f(&probe);
        probe[j] = orig;
        let numeric = (hi - lo) / (2.0 * eps);
        let err = relative_error(analytic[j], numeric);
        if report.worst_coord.is_none() || err > report.max_rel_error || err.is_nan() {
            report.max_rel_error = if err.is_nan() { f64::INFINITY } else { err };
            report.worst_coord = Some(j);
        }
        report.checked += 1;
    }
    report
}

/// Every coordinate when `n ≤ limit`, otherwise `limit` evenly strided ones.
pub fn sampled_coords(n: usize, limit: usize) -> Vec<usize> {
    if n <= limit || limit == 0 {
        return (0..n).collect();
    }
    (0..limit).map(|i| i * n / limit).collect()
}
