//! Log–log least-squares fit of `runtime = C · n^β`.

/// Sizes below this are dominated by fixed overheads and excluded.
pub const MIN_FIT_SIZE: usize = 1024;
/// Fewer usable sizes than this and no fit is attempted.
pub const MIN_FIT_POINTS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PowerLawFit {
    pub c: f64,
    pub beta: f64,
    pub r2: f64,
    /// Number of `(n, runtime)` samples that entered the fit.
    pub points: usize,
}

impl PowerLawFit {
    pub fn predict(&self, n: f64) -> f64 {
        self.c * n.powf(self.beta)
    }
}

/// Fits the samples with `n ≥ MIN_FIT_SIZE` and positive runtime.
///
/// Returns `None` when fewer than [`MIN_FIT_POINTS`] samples qualify or all
/// qualifying sizes are equal.
pub fn fit_power_law(samples: &[(usize, f64)]) -> Option<PowerLawFit> {
    let pts: Vec<(f64, f64)> = samples
        .iter()
        .filter(|(n, t)| *n >= MIN_FIT_SIZE && *t > 0.0 && t.is_finite())
        .map(|&(n, t)| ((n as f64).ln(), t.ln()))
        .collect();
    if pts.len() < MIN_FIT_POINTS {
        return None;
    }
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let beta = sxy / sxx;
    let ln_c = my - beta * mx;
    let ss_res: f64 = pts.iter().map(|p| (p.1 - ln_c - beta * p.0).powi(2)).sum();
    let ss_tot: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    Some(PowerLawFit {
        c: ln_c.exp(),
        beta,
        r2,
        points: pts.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_sizes_are_ignored() {
        let s = [(16, 1.0), (512, 50.0), (1024, 1.0), (2048, 2.0), (4096, 4.0)];
        let f = fit_power_law(&s).unwrap();
        assert_eq!(f.points, 3);
        assert!((f.beta - 1.0).abs() < 1e-12);
    }

    #[test]
    fn too_few_points_give_no_fit() {
        assert!(fit_power_law(&[(1024, 1.0), (2048, 2.0), (512, 0.5)]).is_none());
        assert!(fit_power_law(&[(1024, 1.0), (1024, 2.0), (1024, 3.0)]).is_none());
    }
}
