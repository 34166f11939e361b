//! Agreement between estimated and true parameter vectors.

use crate::error::{Error, Result};
use crate::special::student_t_two_sided;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecoveryScore {
    pub dist: f64,
    pub corr: f64,
    pub pval: f64,
}

/// Distance, correlation and p-value in one call.
pub fn recovery_score(estimated: &[f64], actual: &[f64]) -> Result<RecoveryScore> {
    let dist = euclidean(estimated, actual)?;
    let (corr, pval) = pearson(estimated, actual)?;
    Ok(RecoveryScore { dist, corr, pval })
}

pub fn euclidean(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(Error::InvalidSpec("euclidean distance of empty vectors".into()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt())
}

/// Sample correlation and its two-sided p-value from the t-test with
/// n − 2 degrees of freedom.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch(a.len(), b.len()));
    }
    let n = a.len();
    if n < 3 {
        return Err(Error::UndefinedCorrelation("fewer than 3 points"));
    }
    let constant = |v: &[f64]| v.iter().all(|&x| x == v[0]);
    if constant(a) || constant(b) {
        return Err(Error::UndefinedCorrelation("constant input"));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / n as f64;
    let (ma, mb) = (mean(a), mean(b));
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::UndefinedCorrelation("constant input"));
    }
    let r = (sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0);
    let dof = (n - 2) as f64;
    let pval = if (1.0 - r.abs()) < 1e-15 { 0.0 } else { student_t_two_sided(r * (dof / (1.0 - r * r)).sqrt(), dof) };
    Ok((r, pval.clamp(0.0, 1.0)))
}

pub fn kappa_ratio(estimated: f64, actual: f64) -> Result<f64> {
    if !(actual > 0.0) {
        return Err(Error::InvalidParams(format!("actual kappa must be positive, got {actual}")));
    }
    Ok(estimated / actual)
}
