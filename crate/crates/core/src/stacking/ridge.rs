use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use super::StackingError;

/// Linear model `y = x·W + b` with one column of `W` per target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RidgeModel {
    /// `feature_dim × target_dim`.
    pub coefficients: Matrix,
    pub intercept: Vec<f64>,
}

// Cholesky pivots below this fraction of the largest Gram diagonal count as
// a singular system.
const PIVOT_TOL: f64 = 1e-12;

pub(crate) fn fit(x: &Matrix, y: &Matrix, lambda: f64) -> Result<RidgeModel, StackingError> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(StackingError::InvalidConfig(format!(
            "ridge lambda must be finite and >= 0, got {lambda}"
        )));
    }
    let (n, d, t) = (x.rows(), x.cols(), y.cols());
    if n == 0 {
        return Err(StackingError::InsufficientRows { needed: 1, got: 0 });
    }
    if y.rows() != n {
        return Err(StackingError::DimensionMismatch {
            expected: n,
            actual: y.rows(),
        });
    }
    if !x.is_finite() || !y.is_finite() {
        return Err(StackingError::NonFiniteInput);
    }

    let x_mean = column_means(x);
    let y_mean = column_means(y);
    let xc = DMatrix::from_fn(n, d, |i, j| x.get(i, j) - x_mean[j]);
    let yc = DMatrix::from_fn(n, t, |i, j| y.get(i, j) - y_mean[j]);

    let mut gram = xc.transpose() * &xc;
    for j in 0..d {
        gram[(j, j)] += lambda;
    }
    let rhs = xc.transpose() * &yc;

    let scale = (0..d).map(|j| gram[(j, j)].abs()).fold(0.0, f64::max);
    let chol = gram.cholesky().ok_or(StackingError::SingularSystem)?;
    let min_pivot = (0..d)
        .map(|j| chol.l_dirty()[(j, j)].powi(2))
        .fold(f64::INFINITY, f64::min);
    if d > 0 && min_pivot <= PIVOT_TOL * scale.max(f64::MIN_POSITIVE) {
        return Err(StackingError::SingularSystem);
    }
    let w = chol.solve(&rhs);

    let coefficients = Matrix::from_vec(d, t, (0..d * t).map(|k| w[(k / t, k % t)]).collect());
    let intercept = (0..t)
        .map(|c| y_mean[c] - (0..d).map(|j| x_mean[j] * w[(j, c)]).sum::<f64>())
        .collect();
    Ok(RidgeModel {
        coefficients,
        intercept,
    })
}

impl RidgeModel {
    pub fn predict_row(&self, row: &[f64]) -> Vec<f64> {
        let t = self.intercept.len();
        let mut out = self.intercept.clone();
        for (j, &xj) in row.iter().enumerate() {
            let coef = self.coefficients.row(j);
            for c in 0..t {
                out[c] += xj * coef[c];
            }
        }
        out
    }

    /// Sum of squared residuals plus `lambda·‖W‖²`; the intercept is not
    /// penalized.
    pub fn objective(&self, x: &Matrix, y: &Matrix, lambda: f64) -> f64 {
        let sse: f64 = x
            .iter_rows()
            .zip(y.iter_rows())
            .map(|(xr, yr)| {
                self.predict_row(xr)
                    .iter()
                    .zip(yr)
                    .map(|(p, t)| (p - t).powi(2))
                    .sum::<f64>()
            })
            .sum();
        let penalty: f64 = self.coefficients.as_slice().iter().map(|w| w * w).sum();
        sse + lambda * penalty
    }
}

pub(crate) fn column_means(m: &Matrix) -> Vec<f64> {
    let mut mean = vec![0.0; m.cols()];
    for r in m.iter_rows() {
        for (acc, v) in mean.iter_mut().zip(r) {
            *acc += v;
        }
    }
    let n = m.rows().max(1) as f64;
    mean.iter_mut().for_each(|v| *v /= n);
    mean
}
