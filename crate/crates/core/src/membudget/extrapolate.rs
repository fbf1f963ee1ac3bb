use crate::error::{Error, Result};

/// Least-squares line through measured points and its value at `at`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Extrapolation {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub predicted: f64,
}

/// Fits `y = slope·x + intercept` to `(x, y)` points by ordinary least
/// squares and evaluates it at `at`.
pub fn extrapolate_linear(points: &[(f64, f64)], at: f64) -> Result<Extrapolation> {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if points.len() < 2 || sxx.is_nan() || sxx <= 0.0 {
        return Err(Error::Invalid("extrapolate_linear needs at least two distinct x values".into()));
    }
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    let ss_res: f64 = points.iter().map(|p| (p.1 - (slope * p.0 + intercept)).powi(2)).sum();
    let r_squared = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    Ok(Extrapolation { slope, intercept, r_squared, predicted: slope * at + intercept })
}
