//! Sequence comparison metrics.

use crate::error::{shape_err, ModitError, Result};
use crate::numeric::{Matrix, Real};

fn check_pair<F: Real>(generated: &Matrix<F>, reference: &Matrix<F>, op: &'static str) -> Result<()> {
    if generated.shape() != reference.shape() {
        let (r, c) = reference.shape();
        let (gr, gc) = generated.shape();
        return Err(shape_err(op, format!("{r}x{c}"), format!("{gr}x{gc}")));
    }
    Ok(())
}

/// Mean squared error per entry.
pub fn mse<F: Real>(generated: &Matrix<F>, reference: &Matrix<F>) -> Result<f64> {
    check_pair(generated, reference, "mse")?;
    if generated.is_empty() {
        return Ok(0.0);
    }
    Ok(generated.sub(reference)?.sum_squares().as_f64() / generated.len() as f64)
}

fn first_difference<F: Real>(x: &Matrix<F>) -> Matrix<F> {
    Matrix::from_fn(x.rows().saturating_sub(1), x.cols(), |i, j| x[(i + 1, j)] - x[(i, j)])
}

/// Mean squared error of first temporal differences, per entry.
pub fn velocity_mse<F: Real>(generated: &Matrix<F>, reference: &Matrix<F>) -> Result<f64> {
    check_pair(generated, reference, "velocity_mse")?;
    if generated.rows() < 2 {
        return Err(ModitError::InsufficientSequence { len: generated.rows(), min: 2 });
    }
    mse(&first_difference(generated), &first_difference(reference))
}

/// Jitter: mean over interior frames of `‖x[i+1] − 2x[i] + x[i−1]‖²`.
pub fn jitter<F: Real>(x: &Matrix<F>) -> Result<f64> {
    if x.rows() < 3 {
        return Err(ModitError::InsufficientSequence { len: x.rows(), min: 3 });
    }
    let total: f64 = (1..x.rows() - 1)
        .map(|i| {
            (0..x.cols())
                .map(|j| {
                    let d = (x[(i + 1, j)] - F::of(2.0) * x[(i, j)] + x[(i - 1, j)]).as_f64();
                    d * d
                })
                .sum::<f64>()
        })
        .sum();
    Ok(total / (x.rows() - 2) as f64)
}
