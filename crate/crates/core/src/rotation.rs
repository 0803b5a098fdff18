//! Chordal L2 rotation averaging on SO(3).
//!
//! The minimizer of `Σ wᵢ‖Rᵢ − R‖²_F` over SO(3) is the projection of the
//! weighted sum `M = Σ wᵢRᵢ` onto SO(3), i.e. `U·diag(1, 1, det(UVᵀ))·Vᵀ`
//! for `M = UΣVᵀ`. The SVD is computed with a small symmetric Jacobi
//! eigensolver on `MᵀM`; no general-purpose linear algebra is involved.

use std::f64::consts::PI;

use thiserror::Error;

use crate::exec;
use crate::mat3::{cross, dot, normalize, Mat3};
use crate::model::{check_rotation, ModelError, ROTATION_CONSTRUCT_TOL};

/// Relative tolerance on the second singular value below which the
/// projection is undefined.
pub const SINGULAR_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RotationError {
    #[error("no rotations to average")]
    EmptyInput,
    #[error("every sample weight is zero")]
    AllWeightsZero,
    #[error("sample weight {0} is negative or non-finite")]
    InvalidWeight(f64),
    #[error("rotation mean is undefined: singular values {singular_values:?}")]
    DegenerateInput { singular_values: [f64; 3] },
    #[error("matrix has non-finite entries")]
    NonFinite,
    #[error("sample {index} is not a rotation: {source}")]
    InvalidRotation { index: usize, source: ModelError },
    #[error("grid step {0} outside (0, 0.5]")]
    InvalidGridStep(f64),
}

/// A rotation with a nonnegative weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationSample {
    rotation: Mat3,
    weight: f64,
}

impl RotationSample {
    pub fn new(rotation: Mat3, weight: f64) -> Result<Self, RotationError> {
        check_rotation(&rotation, ROTATION_CONSTRUCT_TOL)
            .map_err(|source| RotationError::InvalidRotation { index: 0, source })?;
        if !(weight.is_finite() && weight >= 0.0) {
            return Err(RotationError::InvalidWeight(weight));
        }
        Ok(RotationSample { rotation, weight })
    }

    pub fn rotation(&self) -> Mat3 {
        self.rotation
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }
}

/// Eigen-decomposition of a symmetric 3×3 matrix by cyclic Jacobi rotations.
/// Returns eigenvalues in descending order and the matching eigenvectors as
/// matrix columns.
fn symmetric_eigen(a: Mat3) -> ([f64; 3], Mat3) {
    let mut a = a;
    let mut v = Mat3::IDENTITY;
    for _sweep in 0..64 {
        let off = a[(0, 1)].powi(2) + a[(0, 2)].powi(2) + a[(1, 2)].powi(2);
        let diag = a[(0, 0)].powi(2) + a[(1, 1)].powi(2) + a[(2, 2)].powi(2);
        if off <= 1e-36 * diag || off == 0.0 {
            break;
        }
        for (p, q) in [(0, 1), (0, 2), (1, 2)] {
            let apq = a[(p, q)];
            if apq == 0.0 {
                continue;
            }
            let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
            let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
            let c = 1.0 / (t * t + 1.0).sqrt();
            let s = t * c;
            let mut j = Mat3::IDENTITY;
            j[(p, p)] = c;
            j[(q, q)] = c;
            j[(p, q)] = s;
            j[(q, p)] = -s;
            a = j.transpose() * a * j;
            // Exact symmetry and the annihilated entry are restored explicitly.
            a[(p, q)] = 0.0;
            a[(q, p)] = 0.0;
            for (r, c2) in [(0, 1), (0, 2), (1, 2)] {
                let avg = 0.5 * (a[(r, c2)] + a[(c2, r)]);
                a[(r, c2)] = avg;
                a[(c2, r)] = avg;
            }
            v = v * j;
        }
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| a[(j, j)].total_cmp(&a[(i, i)]));
    let vals = [a[(order[0], order[0])], a[(order[1], order[1])], a[(order[2], order[2])]];
    let vecs = Mat3::from_cols(v.col(order[0]), v.col(order[1]), v.col(order[2]));
    (vals, vecs)
}

/// Singular values of `m` (descending), computed as `‖m·vᵢ‖` for the
/// eigenvectors `vᵢ` of `mᵀm`.
pub fn singular_values(m: &Mat3) -> [f64; 3] {
    let (_, v) = symmetric_eigen(m.transpose() * *m);
    let s = |i: usize| {
        let u = m.mul_vec(v.col(i));
        dot(u, u).sqrt()
    };
    [s(0), s(1), s(2)]
}

/// Nearest rotation to `m` in the Frobenius sense: maximizes `trace(Rᵀm)`
/// over SO(3).
pub fn project_to_so3(m: &Mat3) -> Result<Mat3, RotationError> {
    if !m.is_finite() {
        return Err(RotationError::NonFinite);
    }
    let (_, v) = symmetric_eigen(m.transpose() * *m);
    let mv: Vec<[f64; 3]> = (0..3).map(|i| m.mul_vec(v.col(i))).collect();
    let sigma: Vec<f64> = mv.iter().map(|u| dot(*u, *u).sqrt()).collect();
    let singular_values = [sigma[0], sigma[1], sigma[2]];
    if sigma[0] == 0.0 || sigma[1] <= SINGULAR_TOL * sigma[0] {
        return Err(RotationError::DegenerateInput { singular_values });
    }
    let u0 = normalize(mv[0]);
    let u1 = {
        let raw = mv[1];
        let d = dot(raw, u0);
        normalize([raw[0] - d * u0[0], raw[1] - d * u0[1], raw[2] - d * u0[2]])
    };
    let u2 = cross(u0, u1);
    // [u0 u1 u2] is proper, so det(UVᵀ) reduces to det(V).
    let flip = v.det().signum();
    let cols = [(u0, v.col(0), 1.0), (u1, v.col(1), 1.0), (u2, v.col(2), flip)];
    let mut r = Mat3::ZERO;
    for (u, vv, s) in cols {
        for row in 0..3 {
            for col in 0..3 {
                r[(row, col)] += s * u[row] * vv[col];
            }
        }
    }
    Ok(r)
}

fn check_inputs<'a>(rotations: impl Iterator<Item = &'a Mat3>) -> Result<(), RotationError> {
    for (index, r) in rotations.enumerate() {
        check_rotation(r, ROTATION_CONSTRUCT_TOL).map_err(|source| RotationError::InvalidRotation { index, source })?;
    }
    Ok(())
}

/// Unweighted chordal L2 mean: `argmin_R Σ ‖Rᵢ − R‖²`.
pub fn chordal_mean(rotations: &[Mat3]) -> Result<Mat3, RotationError> {
    if rotations.is_empty() {
        return Err(RotationError::EmptyInput);
    }
    check_inputs(rotations.iter())?;
    let sum = rotations.iter().fold(Mat3::ZERO, |acc, r| acc + *r);
    project_to_so3(&sum)
}

/// Weighted chordal L2 mean: `argmin_R Σ wᵢ‖Rᵢ − R‖²`. Invariant to a
/// positive rescaling of the weights.
pub fn chordal_mean_weighted(samples: &[RotationSample]) -> Result<Mat3, RotationError> {
    if samples.is_empty() {
        return Err(RotationError::EmptyInput);
    }
    if samples.iter().all(|s| s.weight == 0.0) {
        return Err(RotationError::AllWeightsZero);
    }
    let sum = samples
        .iter()
        .fold(Mat3::ZERO, |acc, s| acc + s.rotation.scale(s.weight));
    project_to_so3(&sum)
}

/// `Σ wᵢ‖Rᵢ − R‖²_F`.
pub fn chordal_objective(samples: &[RotationSample], r: &Mat3) -> f64 {
    samples
        .iter()
        .map(|s| s.weight * (s.rotation - *r).frobenius_norm().powi(2))
        .sum()
}

/// Points spread near-uniformly over the unit sphere.
pub fn fibonacci_sphere(n: usize) -> Vec<[f64; 3]> {
    let golden = PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - (2.0 * i as f64 + 1.0) / n as f64;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let phi = golden * i as f64;
            [r * phi.cos(), r * phi.sin(), z]
        })
        .collect()
}

/// Exhaustive search over an axis-angle grid: axes from a Fibonacci sphere
/// with roughly `grid_step` spacing and angles `0, step, 2·step, … ≤ π`.
/// Returns the grid rotation with the smallest weighted chordal objective.
///
/// The objective is evaluated as `6·Σw − 2·tr(MᵀR)` with `M = Σ wᵢRᵢ`, which
/// separates into per-axis constants and a `cos θ`/`sin θ` combination.
pub fn brute_force_rotation_mean(samples: &[RotationSample], grid_step: f64) -> Result<Mat3, RotationError> {
    if samples.is_empty() {
        return Err(RotationError::EmptyInput);
    }
    if !(grid_step > 0.0 && grid_step <= 0.5) {
        return Err(RotationError::InvalidGridStep(grid_step));
    }
    let m = samples
        .iter()
        .fold(Mat3::ZERO, |acc, s| acc + s.rotation.scale(s.weight));
    let n_axes = ((4.0 * PI) / (grid_step * grid_step)).ceil() as usize;
    let axes = fibonacci_sphere(n_axes);
    let n_angles = (PI / grid_step).floor() as usize + 1;
    let trig: Vec<(f64, f64)> = (0..n_angles).map(|j| (j as f64 * grid_step).sin_cos()).collect();
    let tr = m.trace();
    let skew = [m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]];

    let per_axis = exec::map_range(n_axes, |i| {
        let a = axes[i];
        let w = dot(a, skew);
        let q = dot(a, m.mul_vec(a));
        let mut best = (f64::NEG_INFINITY, 0usize);
        for (j, &(s, c)) in trig.iter().enumerate() {
            let f = q + c * (tr - q) + s * w;
            if f > best.0 {
                best = (f, j);
            }
        }
        best
    });
    let mut best = (f64::NEG_INFINITY, 0usize, 0usize);
    for (i, &(f, j)) in per_axis.iter().enumerate() {
        if f > best.0 {
            best = (f, i, j);
        }
    }
    Ok(Mat3::from_axis_angle(axes[best.1], best.2 as f64 * grid_step))
}
