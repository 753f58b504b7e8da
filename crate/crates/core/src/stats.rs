//! Paired one-sided t-test used to decide baseline refreshes.

use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("paired samples differ in length: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("paired t-test needs at least 2 pairs, got {0}")]
    TooFew(usize),
    #[error("non-finite sample at index {0}")]
    NonFinite(usize),
}

/// p-value for the alternative `mean(a - b) < 0`.
///
/// When the differences have zero variance the test statistic is undefined:
/// all-zero or constant positive differences give 1, constant negative
/// differences give 0.
pub fn paired_t_test_one_sided(a: &[f64], b: &[f64]) -> Result<f64, StatsError> {
    if a.len() != b.len() {
        return Err(StatsError::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    let n = a.len();
    if n < 2 {
        return Err(StatsError::TooFew(n));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    if let Some(i) = diffs.iter().position(|d| !d.is_finite()) {
        return Err(StatsError::NonFinite(i));
    }
    let nf = n as f64;
    let mean = diffs.iter().sum::<f64>() / nf;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (nf - 1.0);
    if var == 0.0 {
        return Ok(if mean < 0.0 { 0.0 } else { 1.0 });
    }
    let t = mean / (var / nf).sqrt();
    let dist = StudentsT::new(0.0, 1.0, nf - 1.0).expect("positive degrees of freedom");
    Ok(dist.cdf(t))
}
