//! Evaluation metrics: mean absolute error and population variance.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("no values")]
    Empty,
}

/// Mean absolute error over paired series, flattened.
///
/// Both sides must have the same number of series and each pair the same
/// length.
pub fn mean_absolute_error<A, B>(predicted: &[A], reference: &[B]) -> Result<f64, MetricError>
where
    A: AsRef<[f64]>,
    B: AsRef<[f64]>,
{
    if predicted.len() != reference.len() {
        return Err(MetricError::LengthMismatch(predicted.len(), reference.len()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (p, r) in predicted.iter().zip(reference) {
        let (p, r) = (p.as_ref(), r.as_ref());
        if p.len() != r.len() {
            return Err(MetricError::LengthMismatch(p.len(), r.len()));
        }
        total += p.iter().zip(r).map(|(a, b)| (a - b).abs()).sum::<f64>();
        count += p.len();
    }
    if count == 0 {
        return Err(MetricError::Empty);
    }
    Ok(total / count as f64)
}

/// Population variance, `(1/n) * sum((x - mean)^2)`.
pub fn population_variance(values: &[f64]) -> Result<f64, MetricError> {
    if values.is_empty() {
        return Err(MetricError::Empty);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    Ok(values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n)
}
