//! Weighted log-log slope fit for scans.

/// Points kept by the fit need `value ≥ 3·std_error`.
pub const NOISE_FLOOR_SIGMAS: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlopeFit {
    pub slope: f64,
    pub std_error: f64,
    pub intercept: f64,
    pub n_used: usize,
}

/// Least squares of `ln y` on `ln x` with weights `1/se(ln y)² = (y/se_y)²`.
///
/// Points with `y < 3 se_y`, non-positive `x`/`y` or non-finite values are
/// dropped. Returns `None` with fewer than two usable points or no spread in `x`.
pub fn fit_log_slope(points: &[(f64, f64, f64)]) -> Option<SlopeFit> {
    let used: Vec<(f64, f64, f64)> = points
        .iter()
        .filter(|(x, y, se)| {
            x.is_finite() && y.is_finite() && se.is_finite() && *x > 0.0 && *y > 0.0 && *y >= NOISE_FLOOR_SIGMAS * se
        })
        .map(|&(x, y, se)| {
            // A zero standard error would get infinite weight; fall back to unit weight.
            let w = if se > 0.0 { (y / se).powi(2) } else { 1.0 };
            (x.ln(), y.ln(), w)
        })
        .collect();
    if used.len() < 2 {
        return None;
    }
    let sw: f64 = used.iter().map(|p| p.2).sum();
    let mx = used.iter().map(|p| p.2 * p.0).sum::<f64>() / sw;
    let my = used.iter().map(|p| p.2 * p.1).sum::<f64>() / sw;
    let sxx: f64 = used.iter().map(|p| p.2 * (p.0 - mx).powi(2)).sum();
    if !(sxx > 0.0) {
        return None;
    }
    let sxy: f64 = used.iter().map(|p| p.2 * (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    Some(SlopeFit {
        slope,
        std_error: (1.0 / sxx).sqrt(),
        intercept: my - slope * mx,
        n_used: used.len(),
    })
}
